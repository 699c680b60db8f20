//! Simulator configuration.
//!
//! The text form is one `key = value` per line with dotted section names;
//! `#` starts a comment. A JSON object is accepted too, nested objects being
//! flattened into dotted keys. Every key is checked against the known set.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use crate::error::{Result, SimError};
use crate::ftl::{gtd_entries, FtlKind, FtlParams};
use crate::geometry::FlashGeometry;
use crate::nand::OpCostTable;
use crate::workload::{GenSpec, Pattern, TraceScale};

pub const GEOMETRY_KEYS: [&str; 6] = [
    "geometry.channels",
    "geometry.ways",
    "geometry.planes",
    "geometry.blocks_per_plane",
    "geometry.pages_per_block",
    "geometry.page_size",
];

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    pub pattern: Pattern,
    pub io_pages: u32,
    pub streams: u32,
    pub requests: u64,
    /// `None` means the whole logical space.
    pub working_set: Option<u64>,
    pub trace: Option<String>,
    pub trace_scale: Option<TraceScale>,
    pub open_loop: bool,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            pattern: Pattern::RandRead,
            io_pages: 1,
            streams: 64,
            requests: 10_000,
            working_set: None,
            trace: None,
            trace_scale: None,
            open_loop: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub geometry: FlashGeometry,
    pub costs: OpCostTable,
    pub ftl: FtlParams,
    pub workload: WorkloadConfig,
    pub warmup_multiplier: f64,
    pub seed: u64,
    /// Read back every written LPN after the measured phase.
    pub verify: bool,
    pub check_every: Option<u64>,
}

impl SimConfig {
    /// Defaults everywhere except the geometry, which has none.
    pub fn with_geometry(geometry: FlashGeometry) -> Self {
        SimConfig {
            geometry,
            costs: OpCostTable::default(),
            ftl: FtlParams::default(),
            workload: WorkloadConfig::default(),
            warmup_multiplier: 0.0,
            seed: 0,
            verify: false,
            check_every: None,
        }
    }

    pub fn logical_pages(&self) -> u64 {
        self.ftl.logical_pages(&self.geometry)
    }

    pub fn gen_spec(&self) -> GenSpec {
        GenSpec {
            pattern: self.workload.pattern,
            io_pages: self.workload.io_pages,
            streams: self.workload.streams,
            total_requests: self.workload.requests,
            seed: self.seed,
            working_set: self.workload.working_set.unwrap_or(self.logical_pages()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.costs.validate()?;
        self.ftl.validate()?;
        if !(self.warmup_multiplier >= 0.0 && self.warmup_multiplier.is_finite()) {
            return Err(SimError::Config(
                "warmup.multiplier must be finite and >= 0".into(),
            ));
        }
        if self.check_every == Some(0) {
            return Err(SimError::Config("engine.check_every must be >= 1".into()));
        }
        if self.workload.trace.is_none() {
            self.gen_spec().validate(self.logical_pages())?;
        } else if self.workload.streams == 0 {
            return Err(SimError::Config("workload.streams must be >= 1".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, defaults resolved where they do
    /// not depend on FTL internals.
    pub fn echo(&self) -> BTreeMap<String, Value> {
        let g = &self.geometry;
        let f = &self.ftl;
        let w = &self.workload;
        let auto = |v: Option<u64>| v.map_or(json!("auto"), |x| json!(x));
        let pairs = [
            ("geometry.channels", json!(g.channels)),
            ("geometry.ways", json!(g.ways_per_channel)),
            ("geometry.planes", json!(g.planes_per_chip)),
            ("geometry.blocks_per_plane", json!(g.blocks_per_plane)),
            ("geometry.pages_per_block", json!(g.pages_per_block)),
            ("geometry.page_size", json!(g.page_size)),
            ("costs.read_us", json!(self.costs.read_us)),
            ("costs.write_us", json!(self.costs.write_us)),
            ("costs.erase_us", json!(self.costs.erase_us)),
            ("costs.read_energy", json!(self.costs.read_energy)),
            ("costs.write_energy", json!(self.costs.write_energy)),
            ("costs.erase_energy", json!(self.costs.erase_energy)),
            ("ftl", json!(f.kind.name())),
            ("gc.op_fraction", json!(f.op_fraction)),
            ("gc.t_blocks", json!(f.t_blocks_runs)),
            ("gc.t_encroach", auto(f.t_encroach_pages)),
            ("gc.free_watermark", json!(f.gc_free_watermark)),
            ("gc.run_stripes", auto(f.run_stripes)),
            ("gc.group_entries", auto(f.group_entries)),
            ("gc.cold_fraction", json!(f.cold_popcount_fraction)),
            ("gc.dyn_free_blocks", auto(f.dyn_free_blocks)),
            ("gc.block_all_chips", json!(f.gc_block_all_chips)),
            ("mapping.cmt_fraction", json!(f.effective_cmt_fraction())),
            ("mapping.prefetch", json!(f.effective_prefetch())),
            ("model.max_pieces", json!(f.max_pieces)),
            ("model.epsilon", json!(f.epsilon)),
            ("model.predict_us", json!(f.predict_us)),
            ("model.bitmap_us", json!(f.bitmap_us)),
            ("model.sort_us", json!(f.sort_us)),
            ("model.train_us", json!(f.train_us)),
            ("leaftl.epsilon", json!(f.lea_epsilon)),
            ("leaftl.buffer_pages", json!(f.lea_buffer_pages)),
            ("leaftl.max_segment", json!(f.lea_max_segment)),
            ("workload.pattern", json!(w.pattern.name())),
            (
                "workload.read_fraction",
                match w.pattern {
                    Pattern::Mixed(r) => json!(r),
                    _ => Value::Null,
                },
            ),
            ("workload.io_pages", json!(w.io_pages)),
            ("workload.streams", json!(w.streams)),
            ("workload.requests", json!(w.requests)),
            (
                "workload.working_set",
                json!(w.working_set.unwrap_or(self.logical_pages())),
            ),
            (
                "workload.trace",
                w.trace.as_ref().map_or(Value::Null, |t| json!(t)),
            ),
            (
                "workload.trace_scale",
                w.trace_scale
                    .map_or(Value::Null, |s| json!(format!("{}/{}", s.num, s.den))),
            ),
            ("workload.open_loop", json!(w.open_loop)),
            ("warmup.multiplier", json!(self.warmup_multiplier)),
            ("seed", json!(self.seed)),
            ("engine.verify", json!(self.verify)),
            (
                "engine.check_every",
                self.check_every.map_or(Value::Null, |c| json!(c)),
            ),
        ];
        let mut m: BTreeMap<String, Value> =
            pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        m.insert("derived.logical_pages".into(), json!(self.logical_pages()));
        m.insert("derived.gtd_entries".into(), json!(gtd_entries(g)));
        m.insert("derived.cmt_capacity".into(), json!(f.cmt_capacity(g)));
        m
    }
}

/// Raw key/value pairs before interpretation. Sweeps edit this form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    /// JSON if the first non-blank character is `{`, else `key = value`.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Self::parse_json(text)
        } else {
            Self::parse_text(text)
        }
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| SimError::Parse {
                line: line_no,
                msg: format!("expected 'key = value', got '{body}'"),
            })?;
            let k = k.trim();
            let v = v.trim();
            let v = v
                .strip_prefix('"')
                .and_then(|s| s.strip_suffix('"'))
                .unwrap_or(v);
            if k.is_empty() {
                return Err(SimError::Parse {
                    line: line_no,
                    msg: "empty key".into(),
                });
            }
            if raw.entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(SimError::Parse {
                    line: line_no,
                    msg: format!("duplicate key '{k}'"),
                });
            }
        }
        Ok(raw)
    }

    pub fn parse_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| SimError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        let mut raw = RawConfig::default();
        flatten("", &v, &mut raw.entries)?;
        Ok(raw)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn build(&self) -> Result<SimConfig> {
        let mut geo: BTreeMap<&str, u32> = BTreeMap::new();
        for k in GEOMETRY_KEYS {
            let v = self
                .get(k)
                .ok_or_else(|| SimError::Config(format!("missing required key '{k}'")))?;
            geo.insert(k, num(k, v)?);
        }
        let mut cfg = SimConfig::with_geometry(FlashGeometry {
            channels: geo["geometry.channels"],
            ways_per_channel: geo["geometry.ways"],
            planes_per_chip: geo["geometry.planes"],
            blocks_per_plane: geo["geometry.blocks_per_plane"],
            pages_per_block: geo["geometry.pages_per_block"],
            page_size: geo["geometry.page_size"],
        });
        // pattern first so read_fraction can refine it regardless of order
        if let Some(p) = self.get("workload.pattern") {
            apply(&mut cfg, "workload.pattern", p)?;
        }
        for (k, v) in &self.entries {
            if GEOMETRY_KEYS.contains(&k.as_str()) || k == "workload.pattern" {
                continue;
            }
            apply(&mut cfg, k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) -> Result<()> {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out)?;
            }
        }
        _ if prefix.is_empty() => {
            return Err(SimError::Config("JSON config must be an object".into()))
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        Value::Number(_) | Value::Bool(_) => {
            out.insert(prefix.to_string(), v.to_string());
        }
        Value::Null => {
            out.insert(prefix.to_string(), "auto".into());
        }
        Value::Array(_) => {
            return Err(SimError::Config(format!(
                "key '{prefix}': arrays are not allowed"
            )))
        }
    }
    Ok(())
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| SimError::Config(format!("key '{key}': cannot parse '{v}'")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(SimError::Config(format!(
            "key '{key}': expected a boolean, got '{v}'"
        ))),
    }
}

fn opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn pattern(v: &str) -> Result<Pattern> {
    Ok(match v {
        "seq_read" => Pattern::SeqRead,
        "rand_read" => Pattern::RandRead,
        "seq_write" => Pattern::SeqWrite,
        "rand_write" => Pattern::RandWrite,
        "mixed" => Pattern::Mixed(0.5),
        _ => {
            return Err(SimError::Config(format!(
                "workload.pattern must be seq_read|rand_read|seq_write|rand_write|mixed, got '{v}'"
            )))
        }
    })
}

fn apply(cfg: &mut SimConfig, key: &str, v: &str) -> Result<()> {
    let f = &mut cfg.ftl;
    let w = &mut cfg.workload;
    let c = &mut cfg.costs;
    match key {
        "costs.read_us" => c.read_us = num(key, v)?,
        "costs.write_us" => c.write_us = num(key, v)?,
        "costs.erase_us" => c.erase_us = num(key, v)?,
        "costs.read_energy" => c.read_energy = num(key, v)?,
        "costs.write_energy" => c.write_energy = num(key, v)?,
        "costs.erase_energy" => c.erase_energy = num(key, v)?,
        "ftl" => f.kind = v.parse::<FtlKind>()?,
        "gc.op_fraction" => f.op_fraction = num(key, v)?,
        "gc.t_blocks" => f.t_blocks_runs = num(key, v)?,
        "gc.t_encroach" => f.t_encroach_pages = opt(key, v)?,
        "gc.free_watermark" => f.gc_free_watermark = num(key, v)?,
        "gc.run_stripes" => f.run_stripes = opt(key, v)?,
        "gc.group_entries" => f.group_entries = opt(key, v)?,
        "gc.cold_fraction" => f.cold_popcount_fraction = num(key, v)?,
        "gc.dyn_free_blocks" => f.dyn_free_blocks = opt(key, v)?,
        "gc.block_all_chips" => f.gc_block_all_chips = boolean(key, v)?,
        "mapping.cmt_fraction" => f.cmt_fraction = opt(key, v)?,
        "mapping.prefetch" => {
            f.prefetch = if v == "auto" {
                None
            } else {
                Some(boolean(key, v)?)
            }
        }
        "model.max_pieces" => f.max_pieces = num(key, v)?,
        "model.epsilon" => f.epsilon = num(key, v)?,
        "model.predict_us" => f.predict_us = num(key, v)?,
        "model.bitmap_us" => f.bitmap_us = num(key, v)?,
        "model.sort_us" => f.sort_us = num(key, v)?,
        "model.train_us" => f.train_us = num(key, v)?,
        "leaftl.epsilon" => f.lea_epsilon = num(key, v)?,
        "leaftl.buffer_pages" => f.lea_buffer_pages = num(key, v)?,
        "leaftl.max_segment" => f.lea_max_segment = num(key, v)?,
        "workload.pattern" => w.pattern = pattern(v)?,
        "workload.read_fraction" => {
            let r: f64 = num(key, v)?;
            match w.pattern {
                Pattern::Mixed(_) => w.pattern = Pattern::Mixed(r),
                _ => {
                    return Err(SimError::Config(
                        "workload.read_fraction requires workload.pattern = mixed".into(),
                    ))
                }
            }
        }
        "workload.io_pages" => w.io_pages = num(key, v)?,
        "workload.streams" => w.streams = num(key, v)?,
        "workload.requests" => w.requests = num(key, v)?,
        "workload.working_set" => w.working_set = opt(key, v)?,
        "workload.trace" => w.trace = Some(v.to_string()),
        "workload.trace_scale" => {
            let (n, d) = v.split_once('/').ok_or_else(|| {
                SimError::Config(format!("workload.trace_scale must be 'num/den', got '{v}'"))
            })?;
            w.trace_scale = Some(TraceScale {
                num: num(key, n.trim())?,
                den: num(key, d.trim())?,
            });
        }
        "workload.open_loop" => w.open_loop = boolean(key, v)?,
        "warmup.multiplier" => cfg.warmup_multiplier = num(key, v)?,
        "seed" => cfg.seed = num(key, v)?,
        "engine.verify" => cfg.verify = boolean(key, v)?,
        "engine.check_every" => cfg.check_every = opt(key, v)?,
        _ => return Err(SimError::Config(format!("unknown config key '{key}'"))),
    }
    Ok(())
}

/// Whether `key` names a setting, independent of its value.
pub fn is_known_key(key: &str) -> bool {
    if GEOMETRY_KEYS.contains(&key) || key == "workload.pattern" {
        return true;
    }
    let mut probe = SimConfig::with_geometry(FlashGeometry::desk());
    !matches!(apply(&mut probe, key, "\u{0}"), Err(SimError::Config(m)) if m.starts_with("unknown config key"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = "geometry.channels = 2\ngeometry.ways = 2\ngeometry.planes = 1\n\
                        geometry.blocks_per_plane = 64\ngeometry.pages_per_block = 64\ngeometry.page_size = 4096\n";

    #[test]
    fn text_defaults() {
        let cfg = RawConfig::parse(DESK).unwrap().build().unwrap();
        assert_eq!(cfg.geometry, FlashGeometry::desk());
        assert_eq!(cfg.ftl, FtlParams::default());
        assert_eq!(cfg.workload.streams, 64);
    }

    #[test]
    fn comments_quotes_and_values() {
        let text = format!("{DESK}# note\nftl = dftl  # trailing\nworkload.trace = \"t.csv\"\nworkload.trace_scale = 3/2\nseed = 9\n");
        let cfg = RawConfig::parse(&text).unwrap().build().unwrap();
        assert_eq!(cfg.ftl.kind, FtlKind::Dftl);
        assert_eq!(cfg.workload.trace.as_deref(), Some("t.csv"));
        assert_eq!(
            cfg.workload.trace_scale,
            Some(TraceScale { num: 3, den: 2 })
        );
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn json_matches_text() {
        let json = r#"{"geometry": {"channels": 2, "ways": 2, "planes": 1, "blocks_per_plane": 64,
                       "pages_per_block": 64, "page_size": 4096},
                       "ftl": "tpftl", "mapping": {"cmt_fraction": 0.1}, "workload": {"pattern": "mixed", "read_fraction": 0.3}}"#;
        let a = RawConfig::parse(json).unwrap().build().unwrap();
        let text = format!("{DESK}ftl = tpftl\nmapping.cmt_fraction = 0.1\nworkload.read_fraction = 0.3\nworkload.pattern = mixed\n");
        let b = RawConfig::parse(&text).unwrap().build().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.workload.pattern, Pattern::Mixed(0.3));
    }

    #[test]
    fn missing_geometry_key() {
        let text = DESK.replace("geometry.planes = 1\n", "");
        let err = RawConfig::parse(&text).unwrap().build().unwrap_err();
        assert!(err.to_string().contains("geometry.planes"), "{err}");
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        let e = RawConfig::parse(&format!("{DESK}gc.bogus = 1\n"))
            .unwrap()
            .build()
            .unwrap_err();
        assert!(e.to_string().contains("gc.bogus"));
        assert!(matches!(
            RawConfig::parse(&format!("{DESK}seed = 1\nseed = 2\n")),
            Err(SimError::Parse { line: 8, .. })
        ));
        assert!(matches!(
            RawConfig::parse("no equals sign"),
            Err(SimError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn known_keys() {
        assert!(is_known_key("ftl"));
        assert!(is_known_key("mapping.cmt_fraction"));
        assert!(is_known_key("geometry.channels"));
        assert!(!is_known_key("mapping.nope"));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RawConfig::parse(&format!("{DESK}ftl = leaftl\nwarmup.multiplier = 2\n"))
            .unwrap()
            .build()
            .unwrap();
        let mut raw = RawConfig::default();
        for (k, v) in cfg.echo() {
            if k.starts_with("derived.") || v.is_null() {
                continue;
            }
            let s = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            raw.set(&k, &s);
        }
        let mut back = raw.build().unwrap();
        // resolved defaults come back as explicit values
        back.ftl.cmt_fraction = None;
        back.ftl.prefetch = None;
        back.workload.working_set = None;
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            "ftl = fancy",
            "seed = -1",
            "mapping.cmt_fraction = 2",
            "workload.io_pages = 0",
            "gc.block_all_chips = maybe",
        ] {
            assert!(
                RawConfig::parse(&format!("{DESK}{bad}\n"))
                    .unwrap()
                    .build()
                    .is_err(),
                "{bad}"
            );
        }
    }
}
