//! Stage orchestration over an output directory:
//!
//! ```text
//! out/config.json
//! out/checkpoints/{baseline,admm,masked,purified,quantized,mapped}/
//! out/reports/*.csv
//! ```
//!
//! Every stage reads its predecessor's checkpoint, so any stage can be
//! re-run on its own.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xbprune_core::admm::{admm_run, hard_mask_and_retrain, layer_schemes, quantize_network};
use xbprune_core::cost::{estimate, CostReport};
use xbprune_core::distill::distill_quantize;
use xbprune_core::mapper::{map_weights, CrossbarMap};
use xbprune_core::purify::{compression_ratio, purify};
use xbprune_core::sim::{simulate_inference, NonidealityConfig};
use xbprune_core::train::{evaluate, train, TrainOptions};
use xbprune_core::{AdmmPhase, Dataset, Network, OptimizerConfig, PruneMask};

use crate::checkpoint::{Checkpoint, StageTag};
use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::idx::load_mnist;
use crate::report::{opt, Table};

/// ADC resolution treated as ideal by the simulate stage.
pub const IDEAL_ADC_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Train,
    Admm,
    Mask,
    Purify,
    Quantize,
    Map,
    Simulate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] =
        [Stage::Train, Stage::Admm, Stage::Mask, Stage::Purify, Stage::Quantize, Stage::Map, Stage::Simulate, Stage::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Admm => "admm",
            Stage::Mask => "mask",
            Stage::Purify => "purify",
            Stage::Quantize => "quantize",
            Stage::Map => "map",
            Stage::Simulate => "simulate",
            Stage::Report => "report",
        }
    }

    /// Checkpoint the stage consumes.
    pub fn input(self) -> Option<StageTag> {
        match self {
            Stage::Train => None,
            Stage::Admm => Some(StageTag::Baseline),
            Stage::Mask => Some(StageTag::Admm),
            Stage::Purify => Some(StageTag::Masked),
            Stage::Quantize => Some(StageTag::Purified),
            Stage::Map => Some(StageTag::Quantized),
            Stage::Simulate | Stage::Report => Some(StageTag::Mapped),
        }
    }

    /// Checkpoint the stage produces.
    pub fn output(self) -> Option<StageTag> {
        match self {
            Stage::Train => Some(StageTag::Baseline),
            Stage::Admm => Some(StageTag::Admm),
            Stage::Mask => Some(StageTag::Masked),
            Stage::Purify => Some(StageTag::Purified),
            Stage::Quantize => Some(StageTag::Quantized),
            Stage::Map => Some(StageTag::Mapped),
            Stage::Simulate | Stage::Report => None,
        }
    }

    /// Additional checkpoints read besides the input (the distillation
    /// teacher, the dense reference for costing).
    fn needs_baseline(self) -> bool {
        matches!(self, Stage::Quantize | Stage::Report)
    }

    fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).expect("listed")
    }

    /// Distinct seed per stage derived from the run seed.
    fn seed(self, run: u64) -> u64 {
        run.wrapping_mul(1000).wrapping_add(self.index() as u64)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| CliError::Config(format!("unknown stage {s:?}")))
    }
}

pub fn checkpoint_dir(out: &Path, tag: StageTag) -> PathBuf {
    out.join("checkpoints").join(tag.as_str())
}

pub fn reports_dir(out: &Path) -> PathBuf {
    out.join("reports")
}

/// Stages must be listed in pipeline order without gaps.
pub fn validate_order(stages: &[Stage]) -> Result<()> {
    if stages.is_empty() {
        return Err(CliError::StageOrder("no stages requested".into()));
    }
    for w in stages.windows(2) {
        if w[1].index() != w[0].index() + 1 {
            return Err(CliError::StageOrder(format!("{} cannot follow {}", w[1], w[0])));
        }
    }
    Ok(())
}

fn check_tag(dir: &Path, want: StageTag) -> Result<()> {
    let text = std::fs::read(dir.join("manifest.json"))
        .map_err(|_| CliError::StageOrder(format!("{} needs a {want} checkpoint at {}", want, dir.display())))?;
    #[derive(serde::Deserialize)]
    struct Head {
        stage: StageTag,
    }
    let head: Head = serde_json::from_slice(&text)
        .map_err(|e| CliError::Checkpoint { path: dir.to_path_buf(), detail: format!("manifest: {e}") })?;
    if head.stage != want {
        return Err(CliError::StageOrder(format!("expected a {want} checkpoint at {}, found {}", dir.display(), head.stage)));
    }
    Ok(())
}

/// Train and test splits, loaded on first use.
struct Data {
    dir: PathBuf,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
    train: Option<Dataset>,
    test: Option<Dataset>,
}

impl Data {
    fn load(&self, split: &str, limit: Option<usize>) -> Result<Dataset> {
        let d = load_mnist(&self.dir, split)?;
        Ok(match limit {
            Some(n) => d.head(n),
            None => d,
        })
    }

    fn train(&mut self) -> Result<&Dataset> {
        if self.train.is_none() {
            self.train = Some(self.load("train", self.train_limit)?);
        }
        Ok(self.train.as_ref().expect("loaded"))
    }

    fn test(&mut self) -> Result<&Dataset> {
        if self.test.is_none() {
            self.test = Some(self.load("t10k", self.test_limit)?);
        }
        Ok(self.test.as_ref().expect("loaded"))
    }
}

/// One pipeline invocation.
pub struct Run {
    cfg: PipelineConfig,
    hash: String,
    out: PathBuf,
    data: Data,
}

impl Run {
    /// `cfg.data.dir`, when relative, is resolved against `base`.
    pub fn new(cfg: PipelineConfig, out: &Path, base: &Path) -> Result<Self> {
        cfg.validate()?;
        let dir = if cfg.data.dir.is_absolute() { cfg.data.dir.clone() } else { base.join(&cfg.data.dir) };
        let data = Data { dir, train_limit: cfg.data.train_limit, test_limit: cfg.data.test_limit, train: None, test: None };
        Ok(Self { hash: cfg.config_hash(), cfg, out: out.to_path_buf(), data })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn report(&self, name: &str, table: &Table) -> Result<()> {
        table.write(&reports_dir(&self.out).join(format!("{name}.csv")), &self.hash)
    }

    fn save(&self, ck: &Checkpoint) -> Result<()> {
        ck.save(&checkpoint_dir(&self.out, ck.stage))
    }

    fn checkpoint(&self, stage: StageTag, net: Network<f32>, mask: PruneMask, metrics: BTreeMap<String, f64>) -> Checkpoint {
        Checkpoint { stage, config_hash: self.hash.clone(), seed: self.cfg.seed, net, mask, schemes: None, map: None, metrics }
    }

    /// Runs `stages` in order. The first stage reads `stage_input` when
    /// given, otherwise its predecessor's checkpoint under the output
    /// directory. All preconditions are checked before any work starts.
    pub fn run(&mut self, stages: &[Stage], stage_input: Option<&Path>) -> Result<()> {
        validate_order(stages)?;
        let first = stages[0];
        let input_dir = first.input().map(|tag| match stage_input {
            Some(p) => p.to_path_buf(),
            None => checkpoint_dir(&self.out, tag),
        });
        if let (Some(dir), Some(tag)) = (&input_dir, first.input()) {
            check_tag(dir, tag)?;
        }
        let baseline_dir = self.baseline_dir(stage_input);
        if stages.iter().any(|s| s.needs_baseline()) && !stages.contains(&Stage::Train) {
            check_tag(&baseline_dir, StageTag::Baseline)?;
        }
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        let cfg_path = self.out.join("config.json");
        let mut text = serde_json::to_vec_pretty(&self.cfg)?;
        text.push(b'\n');
        std::fs::write(&cfg_path, text).map_err(|e| CliError::io(&cfg_path, e))?;

        let mut current = match &input_dir {
            Some(d) => Some(Checkpoint::load(d)?),
            None => None,
        };
        for &stage in stages {
            let input = current.take();
            let produced = match stage {
                Stage::Train => Some(self.train()?),
                Stage::Admm => Some(self.admm(input.expect("checked"))?),
                Stage::Mask => Some(self.mask(input.expect("checked"))?),
                Stage::Purify => Some(self.purify(input.expect("checked"))?),
                Stage::Quantize => {
                    let teacher = Checkpoint::load(&baseline_dir)?;
                    Some(self.quantize(input.expect("checked"), &teacher)?)
                }
                Stage::Map => Some(self.map(input.expect("checked"))?),
                Stage::Simulate => {
                    let ck = input.expect("checked");
                    self.simulate(&ck)?;
                    Some(ck)
                }
                Stage::Report => {
                    let ck = input.expect("checked");
                    let baseline = Checkpoint::load(&baseline_dir)?;
                    self.cost_report(&ck, &baseline)?;
                    self.summary()?;
                    Some(ck)
                }
            };
            if let (Some(ck), Some(_)) = (&produced, stage.output()) {
                self.save(ck)?;
            }
            current = produced;
        }
        Ok(())
    }

    /// The baseline sits next to the stage input when one is given.
    fn baseline_dir(&self, stage_input: Option<&Path>) -> PathBuf {
        match stage_input.and_then(Path::parent) {
            Some(parent) if parent.join(StageTag::Baseline.as_str()).join("manifest.json").exists() => {
                parent.join(StageTag::Baseline.as_str())
            }
            _ => checkpoint_dir(&self.out, StageTag::Baseline),
        }
    }

    fn accuracy_metrics(&mut self, net: &Network<f32>, mask: &PruneMask) -> Result<BTreeMap<String, f64>> {
        let acc = evaluate(net, self.data.test()?)?;
        let table = compression_ratio(mask);
        Ok(BTreeMap::from([
            ("test_accuracy".to_string(), acc),
            ("compression_ratio".to_string(), table.ratio),
            ("retained_weights".to_string(), table.retained as f64),
        ]))
    }

    fn train(&mut self) -> Result<Checkpoint> {
        let mut net = Network::<f32>::from_specs(self.cfg.model.input, &self.cfg.model.layers)?;
        net.init_kaiming(&mut ChaCha8Rng::seed_from_u64(Stage::Train.seed(self.cfg.seed)));
        let opt_cfg = OptimizerConfig { seed: Stage::Train.seed(self.cfg.seed), ..self.cfg.train.clone() };
        let report = train(&mut net, self.data.train()?, &opt_cfg, TrainOptions::default())?;
        let mask = PruneMask::dense(&net);
        let metrics = self.accuracy_metrics(&net, &mask)?;
        let mut t = Table::new(&["stage", "epoch", "loss", "test_accuracy"]);
        let last = report.loss_curve.len();
        for (e, loss) in report.loss_curve.iter().enumerate() {
            let acc = (e + 1 == last).then(|| metrics["test_accuracy"]);
            t.push(vec!["train".into(), e.to_string(), loss.to_string(), opt(acc)]);
        }
        self.report("train_accuracy", &t)?;
        Ok(self.checkpoint(StageTag::Baseline, net, mask, metrics))
    }

    fn admm(&mut self, input: Checkpoint) -> Result<Checkpoint> {
        let mut net = input.net;
        let constraints = self.cfg.sparsity_constraints(&net)?;
        let mut admm_cfg = self.cfg.admm.clone();
        admm_cfg.phase = AdmmPhase::Sparsity;
        admm_cfg.optimizer.seed = Stage::Admm.seed(self.cfg.seed);
        let outcome = admm_run(&mut net, self.data.train()?, &constraints, None, &admm_cfg, Some(&input.mask))?;
        let mut t = Table::new(&["round", "layer", "w_minus_y", "w_minus_z"]);
        for r in &outcome.history {
            t.push(vec![r.round.to_string(), r.layer.to_string(), opt(r.w_minus_y), opt(r.w_minus_z)]);
        }
        self.report("admm_residuals", &t)?;
        let mut t = Table::new(&["round", "total_w_minus_y"]);
        for (i, v) in outcome.total_sparsity_residuals().iter().enumerate() {
            t.push(vec![i.to_string(), v.to_string()]);
        }
        self.report("admm_residual_totals", &t)?;
        let mut metrics = self.accuracy_metrics(&net, &input.mask)?;
        if let Some(v) = outcome.total_sparsity_residuals().last() {
            metrics.insert("final_w_minus_y".into(), *v);
        }
        Ok(self.checkpoint(StageTag::Admm, net, input.mask, metrics))
    }

    fn mask(&mut self, input: Checkpoint) -> Result<Checkpoint> {
        let mut net = input.net;
        let constraints = self.cfg.sparsity_constraints(&net)?;
        let retrain = OptimizerConfig { seed: Stage::Mask.seed(self.cfg.seed), ..self.cfg.retrain.clone() };
        let mask = hard_mask_and_retrain(&mut net, self.data.train()?, &constraints, None, &retrain, Some(&input.mask))?;
        let metrics = self.accuracy_metrics(&net, &mask)?;
        self.compression_report("masked_compression", &mask)?;
        Ok(self.checkpoint(StageTag::Masked, net, mask, metrics))
    }

    fn compression_report(&self, name: &str, mask: &PruneMask) -> Result<()> {
        let table = compression_ratio(mask);
        let mut t = Table::new(&["layer", "total", "retained", "ratio"]);
        for l in &table.layers {
            t.push(vec![l.layer.to_string(), l.total.to_string(), l.retained.to_string(), l.ratio.to_string()]);
        }
        t.push(vec!["all".into(), table.total.to_string(), table.retained.to_string(), table.ratio.to_string()]);
        self.report(name, &t)
    }

    fn purify(&mut self, input: Checkpoint) -> Result<Checkpoint> {
        let mut net = input.net;
        let (mask, report) = purify(&mut net, &input.mask, &self.cfg.purification)?;
        let mut t = Table::new(&["layer", "kind", "index", "reason", "action"]);
        for (list, action) in [(&report.removals, "removed"), (&report.skipped, "skipped")] {
            for r in list {
                let kind = match r.kind {
                    xbprune_core::purify::StructureKind::Filter => "filter",
                    xbprune_core::purify::StructureKind::Channel => "channel",
                };
                t.push(vec![r.layer.to_string(), kind.into(), r.index.to_string(), r.reason.as_str().into(), action.into()]);
            }
        }
        self.report("purify_removals", &t)?;
        self.compression_report("purified_compression", &mask)?;
        let metrics = self.accuracy_metrics(&net, &mask)?;
        Ok(self.checkpoint(StageTag::Purified, net, mask, metrics))
    }

    fn quantize(&mut self, input: Checkpoint, teacher: &Checkpoint) -> Result<Checkpoint> {
        let hw = &self.cfg.hardware;
        let schemes = layer_schemes(&input.net, &input.mask, hw.weight_bits(), hw.on_off_ratio())?;
        let mut distill = self.cfg.distill.clone();
        distill.optimizer.seed = Stage::Quantize.seed(self.cfg.seed);
        let train = self.data.train()?.clone();
        let test = self.data.test()?.clone();
        let (net, report) = distill_quantize(&input.net, &input.mask, &teacher.net, &schemes, &train, &distill, Some(&test))?;
        let mut t = Table::new(&["stage", "epoch", "loss", "test_accuracy"]);
        for (e, loss) in report.loss_curve.iter().enumerate() {
            t.push(vec!["quantize".into(), e.to_string(), loss.to_string(), opt(report.epoch_accuracy.get(e).copied())]);
        }
        self.report("quantize_accuracy", &t)?;
        let metrics = self.accuracy_metrics(&net, &input.mask)?;
        let mut ck = self.checkpoint(StageTag::Quantized, net, input.mask, metrics);
        ck.schemes = Some(schemes);
        Ok(ck)
    }

    fn map(&mut self, input: Checkpoint) -> Result<Checkpoint> {
        let schemes = input
            .schemes
            .as_ref()
            .ok_or_else(|| CliError::StageOrder("quantized checkpoint carries no level schemes".into()))?;
        let map = map_weights(&input.net, &input.mask, schemes, &self.cfg.hardware)?;
        self.layout_report("map_layout", &map)?;
        let mut metrics = input.metrics.clone();
        metrics.insert("physical_crossbars".into(), map.physical_crossbars() as f64);
        let mut ck = Checkpoint { stage: StageTag::Mapped, config_hash: self.hash.clone(), metrics, ..input };
        ck.map = Some(map);
        Ok(ck)
    }

    fn layout_report(&self, name: &str, map: &CrossbarMap) -> Result<()> {
        let mut t = Table::new(&["layer", "rows_kept", "cols_kept", "logical_tiles", "physical_crossbars", "utilization_pct"]);
        for (row, lm) in map.layout().iter().zip(&map.layers) {
            t.push(vec![
                row.layer.to_string(),
                lm.input_rows.len().to_string(),
                lm.output_cols.len().to_string(),
                row.logical_tiles.to_string(),
                row.physical_crossbars.to_string(),
                row.utilization_pct.to_string(),
            ]);
        }
        self.report(name, &t)
    }

    fn simulate(&mut self, ck: &Checkpoint) -> Result<()> {
        let map = ck.map.as_ref().ok_or_else(|| CliError::StageOrder("mapped checkpoint carries no crossbar map".into()))?;
        let data = self.data.test()?.head(self.cfg.data.sim_samples);
        let mut t = Table::new(&["run", "variation_sigma", "seed", "adc_bits", "accuracy", "software_accuracy", "agreement", "layer_rms"]);
        let base = &self.cfg.nonideality;
        let ideal = NonidealityConfig { variation_sigma: 0.0, drift_rate: 0.0, adc_bits: IDEAL_ADC_BITS, ..base.clone() };
        let mut runs = vec![("ideal", ideal), ("configured", base.clone())];
        for &sigma in &self.cfg.sweep.sigmas {
            for s in 0..self.cfg.sweep.seeds {
                runs.push(("sweep", NonidealityConfig { variation_sigma: sigma, seed: base.seed.wrapping_add(s), ..base.clone() }));
            }
        }
        for (name, cfg) in runs {
            let r = simulate_inference(map, &ck.net, &data, &cfg)?;
            t.push(vec![
                name.into(),
                cfg.variation_sigma.to_string(),
                cfg.seed.to_string(),
                cfg.adc_bits.to_string(),
                r.accuracy.to_string(),
                r.software_accuracy.to_string(),
                r.agreement.to_string(),
                r.layer_rms.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
            ]);
        }
        self.report("simulation", &t)
    }

    /// Dense reference: the baseline projected onto the same device levels
    /// and mapped without pruning.
    pub fn dense_map(&self, baseline: &Checkpoint) -> Result<CrossbarMap> {
        let hw = &self.cfg.hardware;
        let mut net = baseline.net.clone();
        let mask = PruneMask::dense(&net);
        let schemes = layer_schemes(&net, &mask, hw.weight_bits(), hw.on_off_ratio())?;
        quantize_network(&mut net, &schemes, &mask)?;
        let mask = PruneMask::from_nonzero(&net);
        Ok(map_weights(&net, &mask, &schemes, hw)?)
    }

    fn cost_report(&self, ck: &Checkpoint, baseline: &Checkpoint) -> Result<()> {
        let map = ck.map.as_ref().ok_or_else(|| CliError::StageOrder("mapped checkpoint carries no crossbar map".into()))?;
        let hw = &self.cfg.hardware;
        let dense = estimate(&self.dense_map(baseline)?, hw, &self.cfg.unit_costs)?;
        let pruned = estimate(map, hw, &self.cfg.unit_costs)?;
        let mut t = Table::new(&[
            "model",
            "layer",
            "crossbars",
            "crossbar_area_mm2",
            "crossbar_power_w",
            "peripheral_area_mm2",
            "peripheral_power_w",
            "total_area_mm2",
            "total_power_w",
        ]);
        let push = |t: &mut Table, model: &str, r: &CostReport| {
            for l in &r.layers {
                t.push(vec![
                    model.into(),
                    l.layer.to_string(),
                    l.crossbars.to_string(),
                    l.crossbar_area_mm2.to_string(),
                    l.crossbar_power_w.to_string(),
                    (l.adc_area_mm2 + l.driver_area_mm2).to_string(),
                    (l.adc_power_w + l.driver_power_w).to_string(),
                    l.area_mm2().to_string(),
                    l.power_w().to_string(),
                ]);
            }
            t.push(vec![
                model.into(),
                "htree".into(),
                String::new(),
                String::new(),
                String::new(),
                r.htree_area_mm2.to_string(),
                r.htree_power_w.to_string(),
                r.htree_area_mm2.to_string(),
                r.htree_power_w.to_string(),
            ]);
            t.push(vec![
                model.into(),
                "total".into(),
                r.crossbars.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                r.total_area_mm2.to_string(),
                r.total_power_w.to_string(),
            ]);
        };
        push(&mut t, "dense", &dense);
        push(&mut t, "compressed", &pruned);
        self.report("cost", &t)
    }

    /// One row per checkpoint present in the output directory.
    fn summary(&self) -> Result<()> {
        let mut t = Table::new(&["stage", "test_accuracy", "compression_ratio", "retained_weights", "checkpoint_config_hash"]);
        for tag in StageTag::ALL {
            let dir = checkpoint_dir(&self.out, tag);
            if !dir.join("manifest.json").exists() {
                continue;
            }
            let ck = Checkpoint::load(&dir)?;
            let m = |k: &str| opt(ck.metrics.get(k).copied());
            t.push(vec![tag.as_str().into(), m("test_accuracy"), m("compression_ratio"), m("retained_weights"), ck.config_hash.clone()]);
        }
        self.report("summary", &t)
    }
}
