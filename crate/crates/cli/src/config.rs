//! Run configuration file: model config, train config, dataset spec,
//! and seed. Command-line flags override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use patchgen_core::codec::{self, ParamSpace, PatternFamily};
use patchgen_core::decoder::{LocalMode, ModelConfig, RpeFeed};
use patchgen_core::error::{Error, Result};
use patchgen_core::grid::GridDims;
use patchgen_core::pipeline::{LossMode, TrainConfig, TrainSample};
use patchgen_core::plan::{reachable_offsets, PlanKind, ScanOrder};
use patchgen_core::pool::Extent;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_m_side")]
    pub m_side: usize,
    #[serde(default = "d_vocab")]
    pub vocab: usize,
    /// Enables the text encoder and cross-attention.
    #[serde(default = "default_true")]
    pub text: bool,
    #[serde(default = "d_text_len")]
    pub text_len: usize,
    #[serde(default = "d_rpe_feed")]
    pub rpe_feed: String,
    #[serde(default = "default_true")]
    pub rpe_every_layer: bool,
    #[serde(default = "d_mode")]
    pub mode: String,
    #[serde(default = "default_true")]
    pub caches: bool,
    #[serde(default = "d_pnar_rounds")]
    pub pnar_rounds: usize,
    /// (width, height, frame) extent.
    #[serde(default = "d_extent")]
    pub extent: (usize, usize, usize),
}

fn d_layers() -> usize {
    2
}
fn d_dim() -> usize {
    64
}
fn d_heads() -> usize {
    4
}
fn d_m_side() -> usize {
    4
}
fn d_vocab() -> usize {
    64
}
fn d_text_len() -> usize {
    8
}
fn d_rpe_feed() -> String {
    "pre".into()
}
fn d_mode() -> String {
    "ar".into()
}
fn d_pnar_rounds() -> usize {
    8
}
fn d_extent() -> (usize, usize, usize) {
    (2, 2, 0)
}

impl Default for ModelSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl ModelSpec {
    pub fn to_config(&self) -> Result<ModelConfig> {
        let extent = Extent::new(self.extent.0, self.extent.1, self.extent.2);
        let rpe_feed = match self.rpe_feed.as_str() {
            "pre" => RpeFeed::Pre,
            "post" => RpeFeed::Post,
            other => return Err(Error::Usage(format!("unknown rpe feed {other:?}"))),
        };
        let cfg = ModelConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            m_side: self.m_side,
            vocab: self.vocab,
            text_vocab: if self.text { codec::text_vocab() } else { 0 },
            text_len: if self.text { self.text_len } else { 0 },
            rpe_table: reachable_offsets(&PlanKind::DEFAULT_SET, &extent),
            rpe_feed,
            rpe_every_layer: self.rpe_every_layer,
            local_mode: LocalMode::parse(&self.mode)?,
            caches_enabled: self.caches,
            pnar_rounds: self.pnar_rounds,
            extent,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSpec {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup: f64,
    #[serde(default = "d_loss")]
    pub loss: String,
    #[serde(default = "d_orders")]
    pub orders: Vec<String>,
    #[serde(default)]
    pub max_steps: Option<u64>,
}

fn d_epochs() -> usize {
    1
}
fn d_batch() -> usize {
    8
}
fn d_lr() -> f64 {
    1e-3
}
fn d_warmup() -> f64 {
    0.1
}
fn d_loss() -> String {
    "patch".into()
}
fn d_orders() -> Vec<String> {
    vec![
        "omega".into(),
        "omega_star".into(),
        "zeta".into(),
        "zeta_star".into(),
    ]
}

impl Default for TrainSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainSpec {
    pub fn to_config(&self, extent: Extent, seed: u64) -> Result<TrainConfig> {
        let orders: Result<Vec<ScanOrder>> =
            self.orders.iter().map(|s| ScanOrder::parse(s)).collect();
        Ok(TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr as patchgen_core::numerics::Real,
            warmup_frac: self.warmup,
            loss_mode: LossMode::parse(&self.loss)?,
            orders: orders?,
            extent,
            seed,
            max_steps: self.max_steps,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SynthSpec {
    #[serde(default = "d_count")]
    pub count: usize,
    #[serde(default = "d_grid")]
    pub grid: String,
    #[serde(default = "d_families")]
    pub families: Vec<String>,
    #[serde(default)]
    pub periods: Option<Vec<usize>>,
    #[serde(default)]
    pub deltas: Option<Vec<u16>>,
    #[serde(default)]
    pub seed: u64,
}

fn d_count() -> usize {
    64
}
fn d_grid() -> String {
    "4x4".into()
}
fn d_families() -> Vec<String> {
    vec!["vstripes".into(), "checker".into()]
}

fn parse_family(s: &str) -> Result<PatternFamily> {
    match s {
        "constant" => Ok(PatternFamily::Constant),
        "hstripes" => Ok(PatternFamily::HStripes),
        "vstripes" => Ok(PatternFamily::VStripes),
        "checker" => Ok(PatternFamily::Checker),
        "ramp" => Ok(PatternFamily::Ramp),
        other => Err(Error::Usage(format!("unknown pattern family {other:?}"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct DataSpec {
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub data: DataSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let bytes = std::fs::read(p)?;
                Ok(serde_json::from_slice(&bytes)?)
            }
        }
    }

    /// Stable 64-bit hash of the effective configuration.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canon.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// "HxW" or "HxWxF" in patch units.
pub fn parse_grid(s: &str, m_side: usize, vocab: usize) -> Result<GridDims> {
    let parts: Vec<&str> = s.split('x').collect();
    let parse = |t: &str| -> Result<usize> {
        t.parse()
            .map_err(|_| Error::Usage(format!("bad grid component {t:?} in {s:?}")))
    };
    match parts.as_slice() {
        [h, w] => GridDims::new(parse(h)?, parse(w)?, 1, m_side, vocab),
        [h, w, f] => GridDims::new(parse(h)?, parse(w)?, parse(f)?, m_side, vocab),
        _ => Err(Error::Usage(format!("grid {s:?} is not HxW or HxWxF"))),
    }
}

/// "W,H,F" extent.
pub fn parse_extent(s: &str) -> Result<Extent> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Usage(format!("extent {s:?} is not W,H,F")));
    }
    let parse = |t: &str| -> Result<usize> {
        t.trim()
            .parse()
            .map_err(|_| Error::Usage(format!("bad extent component {t:?}")))
    };
    Ok(Extent::new(parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}

/// "R,C" placement.
pub fn parse_place(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::Usage(format!("placement {s:?} is not R,C")));
    }
    let parse = |t: &str| -> Result<usize> {
        t.trim()
            .parse()
            .map_err(|_| Error::Usage(format!("bad placement component {t:?}")))
    };
    Ok((parse(parts[0])?, parse(parts[1])?))
}

/// Builds the training/eval dataset named by the config: either a
/// directory of NWIT files (captions in sibling .txt files) or a
/// synthetic pattern set.
pub fn load_dataset(data: &DataSpec, model: &ModelSpec) -> Result<Vec<TrainSample>> {
    if let Some(dir) = &data.dir {
        let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "nwit"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Usage(format!("no .nwit files under {dir}")));
        }
        let mut out = Vec::with_capacity(paths.len());
        for p in paths {
            let grid = patchgen_core::grid::TokenGrid::read_nwit(&p)?;
            let caption_path = p.with_extension("txt");
            let caption = if caption_path.exists() {
                let text = std::fs::read_to_string(&caption_path)?;
                Some(codec::caption_from_text(text.trim())?)
            } else {
                None
            };
            out.push(TrainSample { grid, caption });
        }
        return Ok(out);
    }
    let synth = data.synth.clone().unwrap_or_default();
    let dims = parse_grid(&synth.grid, model.m_side, model.vocab)?;
    let families: Result<Vec<PatternFamily>> =
        synth.families.iter().map(|f| parse_family(f)).collect();
    let mix: Vec<(PatternFamily, f64)> = families?.into_iter().map(|f| (f, 1.0)).collect();
    let mut space = ParamSpace::full(model.vocab);
    if let Some(periods) = synth.periods {
        space.periods = periods;
    }
    if let Some(deltas) = synth.deltas {
        space.deltas = deltas;
    }
    let raw = codec::synth_dataset_in(&mix, synth.count, &dims, synth.seed, &space)?;
    Ok(raw
        .into_iter()
        .map(|(grid, caption, _)| TrainSample {
            grid,
            caption: Some(caption),
        })
        .collect())
}
