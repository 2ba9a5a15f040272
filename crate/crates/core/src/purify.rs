//! Network purification and unused path removal on a structured-pruned
//! network.
//!
//! Filter `j` of weighted layer `l` feeds a contiguous block of GEMM columns
//! of layer `l + 1`: `kh * kw` columns for a conv successor, `H * W` for an
//! fc reached through a flatten of an `H x W` map, one column for fc -> fc.
//! That block is "channel `j`" of layer `l + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LayerMask, PruneMask};
use crate::network::{Conv2d, Layer, Linear, Network};
use crate::scalar::Scalar;
use crate::tensor::WeightTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PurificationConfig {
    /// Columns with squared norm below this count as empty.
    pub th1: f64,
    /// Emptiness-ratio threshold.
    pub th2: f64,
    /// Importance-score threshold.
    pub th3: f64,
    /// Filter squared-norm floor.
    pub th4: f64,
}

impl Default for PurificationConfig {
    fn default() -> Self {
        Self { th1: 1e-4, th2: 0.1, th3: 1e-3, th4: 1e-4 }
    }
}

impl PurificationConfig {
    pub fn zero() -> Self {
        Self { th1: 0.0, th2: 0.0, th3: 0.0, th4: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.th1, self.th2, self.th3, self.th4].iter().all(|t| *t >= 0.0 && t.is_finite())
            && self.th2 <= 1.0;
        if !ok {
            return Err(Error::Config(format!("purification thresholds must be >= 0 with th2 <= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Fraction of columns whose squared norm is nonzero and at least `th1`.
pub fn emptiness_ratio(column_norms_sq: &[f64], th1: f64) -> f64 {
    if column_norms_sq.is_empty() {
        return 0.0;
    }
    let live = column_norms_sq.iter().filter(|&&n| n > 0.0 && n >= th1).count();
    live as f64 / column_norms_sq.len() as f64
}

/// Mean squared column norm over all columns of the channel.
pub fn importance_score(column_norms_sq: &[f64]) -> f64 {
    if column_norms_sq.is_empty() {
        return 0.0;
    }
    column_norms_sq.iter().sum::<f64>() / column_norms_sq.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub layer: usize,
    pub channel: usize,
    pub eta: f64,
    pub score: f64,
    pub delta: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Filter,
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemovalReason {
    Empty,
    LowScore,
    MirrorOfRemoved,
}

impl RemovalReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RemovalReason::Empty => "empty",
            RemovalReason::LowScore => "low-score",
            RemovalReason::MirrorOfRemoved => "mirror-of-removed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub layer: usize,
    pub kind: StructureKind,
    pub index: usize,
    pub reason: RemovalReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PurifyReport {
    pub removals: Vec<Removal>,
    /// Candidates left in place because the junction to their mirror layer has
    /// no channel correspondence.
    pub skipped: Vec<Removal>,
    pub retained_before: usize,
    pub retained_after: usize,
}

/// Columns of weighted layer `l + 1` fed by one filter of layer `l`, or
/// `None` when the layers between them mix channels.
pub fn junction_width<T: Scalar>(net: &Network<T>, l: usize) -> Option<usize> {
    let idx = net.weighted_indices();
    let (a, b) = (idx[l], idx[l + 1]);
    if !net.layers()[a + 1..b].iter().all(|x| x.kind().preserves_channels()) {
        return None;
    }
    let filters = net.weight(l).rows();
    let next = net.weight(l + 1);
    let kk = if next.shape.len() == 4 { next.shape[2] * next.shape[3] } else { 1 };
    let in_channels = next.shape[1];
    (in_channels % filters == 0).then(|| in_channels / filters * kk)
}

/// Columns per channel of every weighted layer. The first layer, and any
/// layer behind a channel-mixing junction, uses its own input channels.
pub fn channel_widths<T: Scalar>(net: &Network<T>) -> Vec<usize> {
    (0..net.num_weighted())
        .map(|l| {
            let own = {
                let w = net.weight(l);
                if w.shape.len() == 4 {
                    w.shape[2] * w.shape[3]
                } else {
                    1
                }
            };
            if l == 0 {
                own
            } else {
                junction_width(net, l - 1).unwrap_or(own)
            }
        })
        .collect()
}

fn column_norms_sq<T: Scalar>(w: &WeightTensor<T>) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (c, o) in out.iter_mut().enumerate() {
            let v = w.values[r * cols + c].as_f64();
            *o += v * v;
        }
    }
    out
}

/// `eta` and `score` of every channel of every weighted layer.
pub fn channel_stats<T: Scalar>(net: &Network<T>, th1: f64) -> Vec<ChannelStats> {
    let widths = channel_widths(net);
    let mut out = Vec::new();
    for (l, (w, _)) in net.weighted().enumerate() {
        let norms = column_norms_sq(w);
        for (j, cols) in norms.chunks(widths[l]).enumerate() {
            out.push(ChannelStats {
                layer: l,
                channel: j,
                eta: emptiness_ratio(cols, th1),
                score: importance_score(cols),
                delta: widths[l],
            });
        }
    }
    out
}

fn channel_removed(m: &LayerMask, j: usize, width: usize) -> bool {
    (j * width..(j + 1) * width).all(|c| !m.col_kept(c))
}

fn filter_removed(m: &LayerMask, r: usize) -> bool {
    !m.row_kept(r) && !m.biases[r]
}

struct Pass<'a> {
    mask: &'a mut PruneMask,
    report: &'a mut PurifyReport,
    widths: &'a [usize],
    changed: bool,
}

impl Pass<'_> {
    fn remove_channel(&mut self, l: usize, j: usize, reason: RemovalReason) {
        if channel_removed(&self.mask.layers[l], j, self.widths[l]) {
            return;
        }
        let w = self.widths[l];
        for c in j * w..(j + 1) * w {
            self.mask.layers[l].clear_col(c);
        }
        self.report.removals.push(Removal { layer: l, kind: StructureKind::Channel, index: j, reason });
        self.changed = true;
    }

    fn remove_filter(&mut self, l: usize, r: usize, reason: RemovalReason) {
        if filter_removed(&self.mask.layers[l], r) {
            return;
        }
        self.mask.layers[l].clear_row(r);
        self.report.removals.push(Removal { layer: l, kind: StructureKind::Filter, index: r, reason });
        self.changed = true;
    }
}

/// Removes near-empty, unimportant channels and weak filters together with
/// their mirrors in the adjacent layer, repeating until nothing changes.
/// Never adds weights. Removed weights and biases are zeroed in `net`.
pub fn purify<T: Scalar>(net: &mut Network<T>, mask: &PruneMask, cfg: &PurificationConfig) -> Result<(PruneMask, PurifyReport)> {
    cfg.validate()?;
    if mask.layers.len() != net.num_weighted() {
        return Err(Error::Config(format!("mask has {} layers, network {}", mask.layers.len(), net.num_weighted())));
    }
    let nl = net.num_weighted();
    let widths = channel_widths(net);
    let junctions: Vec<Option<usize>> = (0..nl.saturating_sub(1)).map(|l| junction_width(net, l)).collect();
    let mut mask = mask.clone();
    mask.apply(net);
    let mut report = PurifyReport { retained_before: mask.retained(), ..Default::default() };
    let mut skipped = Vec::new();

    loop {
        let mut pass = Pass { mask: &mut mask, report: &mut report, widths: &widths, changed: false };

        // Channels: empty, or mostly empty and unimportant.
        for s in channel_stats(net, cfg.th1) {
            let (l, j) = (s.layer, s.channel);
            if channel_removed(&pass.mask.layers[l], j, s.delta) {
                // removed earlier (e.g. by ADMM): its feeding filter is dead too
                if l > 0 && junctions[l - 1].is_some() {
                    pass.remove_filter(l - 1, j, RemovalReason::MirrorOfRemoved);
                }
                continue;
            }
            let reason = if s.score == 0.0 {
                RemovalReason::Empty
            } else if s.eta < cfg.th2 && s.score < cfg.th3 {
                RemovalReason::LowScore
            } else {
                continue;
            };
            if l > 0 && junctions[l - 1].is_none() {
                skipped.push(Removal { layer: l, kind: StructureKind::Channel, index: j, reason });
                continue;
            }
            pass.remove_channel(l, j, reason);
            if l > 0 {
                pass.remove_filter(l - 1, j, RemovalReason::MirrorOfRemoved);
            }
        }
        pass.mask.apply(net);

        // Filters: empty (no weights, no bias) or below the energy floor.
        for l in 0..nl {
            let (w, b) = net.weighted().nth(l).expect("layer in range");
            let cols = w.cols();
            for r in 0..w.rows() {
                if filter_removed(&pass.mask.layers[l], r) {
                    if l + 1 < nl && junctions[l].is_some() {
                        pass.remove_channel(l + 1, r, RemovalReason::MirrorOfRemoved);
                    }
                    continue;
                }
                let energy: f64 = w.values[r * cols..(r + 1) * cols].iter().map(|v| v.as_f64().powi(2)).sum::<f64>()
                    + b[r].as_f64().powi(2);
                let reason = if energy == 0.0 {
                    RemovalReason::Empty
                } else if energy < cfg.th4 {
                    RemovalReason::LowScore
                } else {
                    continue;
                };
                if l + 1 < nl && junctions[l].is_none() {
                    skipped.push(Removal { layer: l, kind: StructureKind::Filter, index: r, reason });
                    continue;
                }
                pass.remove_filter(l, r, reason);
                if l + 1 < nl {
                    pass.remove_channel(l + 1, r, RemovalReason::MirrorOfRemoved);
                }
            }
        }
        let changed = pass.changed;
        mask.apply(net);
        if !changed {
            break;
        }
    }
    skipped.sort_by_key(|r| (r.layer, r.kind as u8, r.index));
    skipped.dedup();
    report.skipped = skipped;
    report.retained_after = mask.retained();
    Ok((mask, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCompression {
    pub layer: usize,
    pub total: usize,
    pub retained: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionTable {
    pub layers: Vec<LayerCompression>,
    pub total: usize,
    pub retained: usize,
    pub ratio: f64,
    /// `total - retained`.
    pub parameters_removed: usize,
}

/// Total weights over retained weights, overall and per layer. Biases are
/// not counted.
pub fn compression_ratio(mask: &PruneMask) -> CompressionTable {
    let ratio = |t: usize, r: usize| if r == 0 { f64::INFINITY } else { t as f64 / r as f64 };
    let layers = mask
        .layers
        .iter()
        .enumerate()
        .map(|(l, m)| LayerCompression { layer: l, total: m.weights.len(), retained: m.retained(), ratio: ratio(m.weights.len(), m.retained()) })
        .collect();
    let (total, retained) = (mask.total(), mask.retained());
    CompressionTable { layers, total, retained, ratio: ratio(total, retained), parameters_removed: total - retained }
}

/// A network with removed filter/channel pairs physically deleted.
#[derive(Debug, Clone, PartialEq)]
pub struct Shrunk<T> {
    pub net: Network<T>,
    pub mask: PruneMask,
    /// Original filter index of every surviving row, per weighted layer.
    pub kept_filters: Vec<Vec<usize>>,
}

/// Physically deletes every filter of layer `l` that is removed together with
/// its mirror channel in layer `l + 1`. The last layer's rows and the first
/// layer's input channels are never deleted, so input and output shapes are
/// preserved.
pub fn shrink<T: Scalar>(net: &Network<T>, mask: &PruneMask) -> Result<Shrunk<T>> {
    let nl = net.num_weighted();
    let mut kept_filters: Vec<Vec<usize>> = Vec::with_capacity(nl);
    for l in 0..nl {
        let m = &mask.layers[l];
        let keep: Vec<usize> = match (l + 1 < nl).then(|| junction_width(net, l)).flatten() {
            Some(width) => (0..m.rows)
                .filter(|&r| !(filter_removed(m, r) && channel_removed(&mask.layers[l + 1], r, width)))
                .collect(),
            None => (0..m.rows).collect(),
        };
        kept_filters.push(keep);
    }

    let mut layers = Vec::with_capacity(net.layers().len());
    let mut out_mask = Vec::with_capacity(nl);
    let mut wl = 0;
    for layer in net.layers() {
        let (w, b) = match layer {
            Layer::Conv(c) => (&c.weight, &c.bias),
            Layer::Fc(f) => (&f.weight, &f.bias),
            other => {
                layers.push(other.clone());
                continue;
            }
        };
        let rows = &kept_filters[wl];
        let cols: Vec<usize> = match (wl > 0).then(|| junction_width(net, wl - 1)).flatten() {
            Some(width) => kept_filters[wl - 1].iter().flat_map(|&f| f * width..(f + 1) * width).collect(),
            None => (0..w.cols()).collect(),
        };
        let m = &mask.layers[wl];
        let mut values = Vec::with_capacity(rows.len() * cols.len());
        let mut bits = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            for &c in &cols {
                values.push(w.values[r * w.cols() + c]);
                bits.push(m.weights[r * m.cols + c]);
            }
        }
        let bias: Vec<T> = rows.iter().map(|&r| b[r]).collect();
        let bias_bits: Vec<bool> = rows.iter().map(|&r| m.biases[r]).collect();
        let shape = if w.shape.len() == 4 {
            let kk = w.shape[2] * w.shape[3];
            vec![rows.len(), cols.len() / kk, w.shape[2], w.shape[3]]
        } else {
            vec![rows.len(), cols.len()]
        };
        let weight = WeightTensor::new(shape, values, w.layer_id)?;
        out_mask.push(LayerMask { rows: rows.len(), cols: cols.len(), weights: bits, biases: bias_bits });
        layers.push(match layer {
            Layer::Conv(c) => Layer::Conv(Conv2d { weight, bias, stride: c.stride, padding: c.padding }),
            _ => Layer::Fc(Linear { weight, bias }),
        });
        wl += 1;
    }
    Ok(Shrunk { net: Network::new(net.input_shape(), layers)?, mask: PruneMask { layers: out_mask }, kept_filters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, Shape3};

    #[test]
    fn emptiness_and_importance_by_hand() {
        assert_eq!(emptiness_ratio(&[0.0; 4], 1e-4), 0.0);
        assert_eq!(emptiness_ratio(&[1.0, 0.0, 2.0, 0.0, 0.0], 1e-4), 0.4);
        assert_eq!(emptiness_ratio(&[1.0, 1e-6, 2.0], 1e-4), 2.0 / 3.0);
        assert_eq!(emptiness_ratio(&[1.0, 2.0], 0.0), 1.0);
        assert_eq!(importance_score(&[0.0, 0.0]), 0.0);
        assert_eq!(importance_score(&[1.0, 3.0]), 2.0);
        let c = 3.0f64;
        let base = [0.5, 0.25, 2.0];
        let scaled: Vec<f64> = base.iter().map(|n| n * c * c).collect();
        assert!((importance_score(&scaled) - c * c * importance_score(&base)).abs() < 1e-12);
    }

    fn small_net() -> Network<f64> {
        // conv(1->3, k2) relu pool flatten fc(3*2*2 -> 4) relu fc(4 -> 2)
        let specs = vec![
            LayerSpec::Conv { in_channels: 1, out_channels: 3, kernel: 2, stride: 1, padding: 0 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Fc { in_features: 12, out_features: 4 },
            LayerSpec::Relu,
            LayerSpec::Fc { in_features: 4, out_features: 2 },
        ];
        let mut net = Network::from_specs(Shape3::new(1, 5, 5), &specs).unwrap();
        for (l, (w, b)) in net.weighted_mut().enumerate() {
            for (i, v) in w.values.iter_mut().enumerate() {
                *v = ((i * 7 + l * 3) % 11) as f64 / 10.0 - 0.45;
            }
            b.iter_mut().for_each(|v| *v = 0.05);
        }
        net
    }

    #[test]
    fn channel_widths_follow_the_junctions() {
        let net = small_net();
        assert_eq!(channel_widths(&net), vec![4, 4, 1]);
        assert_eq!(junction_width(&net, 0), Some(4));
        assert_eq!(junction_width(&net, 1), Some(1));
    }

    #[test]
    fn blank_filter_removes_its_mirror_channel() {
        let mut net = small_net();
        let w = net.weight_mut(0);
        for c in 0..4 {
            w.values[4 + c] = 0.0; // filter 1
        }
        net.bias_mut(0)[1] = 0.0;
        let (mask, report) = purify(&mut net, &PruneMask::dense(&small_net()), &PurificationConfig::zero()).unwrap();
        assert!(filter_removed(&mask.layers[0], 1));
        assert!(channel_removed(&mask.layers[1], 1, 4));
        assert!(report.removals.contains(&Removal {
            layer: 1,
            kind: StructureKind::Channel,
            index: 1,
            reason: RemovalReason::MirrorOfRemoved
        }));
        assert_eq!(report.retained_before - report.retained_after, 4 + 4 * 4);
    }

    #[test]
    fn empty_channel_removes_the_feeding_filter() {
        let mut net = small_net();
        for r in 0..2 {
            net.weight_mut(2).values[r * 4 + 3] = 0.0;
        }
        let (mask, _) = purify(&mut net, &PruneMask::dense(&small_net()), &PurificationConfig::zero()).unwrap();
        assert!(channel_removed(&mask.layers[2], 3, 1));
        assert!(filter_removed(&mask.layers[1], 3));
        assert!(net.weight(1).values[12 * 3..12 * 4].iter().all(|v| *v == 0.0));
        assert_eq!(net.bias(1)[3], 0.0);
    }

    #[test]
    fn shrink_deletes_mirrored_pairs_and_keeps_the_function() {
        let mut net = small_net();
        for r in 0..2 {
            net.weight_mut(2).values[r * 4 + 3] = 0.0;
        }
        let (mask, _) = purify(&mut net, &PruneMask::dense(&small_net()), &PurificationConfig::zero()).unwrap();
        let s = shrink(&net, &mask).unwrap();
        assert_eq!(s.kept_filters[1], vec![0, 1, 2]);
        assert_eq!(s.net.weight(2).shape, vec![2, 3]);
        assert_eq!(s.mask.retained(), mask.retained());
        let x = crate::tensor::Activation::from_nchw(1, 1, 5, 5, &(0..25).map(|i| i as f64 / 25.0).collect::<Vec<_>>());
        let a = net.logits(&x).unwrap();
        let b = s.net.logits(&x).unwrap();
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn compression_table_counts() {
        let net = small_net();
        let mut mask = PruneMask::dense(&net);
        assert_eq!(compression_ratio(&mask).ratio, 1.0);
        for m in mask.layers.iter_mut() {
            for (i, k) in m.weights.iter_mut().enumerate() {
                *k = i % 2 == 0;
            }
        }
        let t = compression_ratio(&mask);
        assert_eq!(t.ratio, 2.0);
        assert!(t.layers.iter().all(|l| l.ratio == 2.0));
        assert_eq!(t.parameters_removed, t.total / 2);
    }

    #[test]
    fn channel_masked_upstream_takes_its_filter_with_it() {
        let mut net = small_net();
        let mut mask = PruneMask::dense(&net);
        mask.layers[2].clear_col(2);
        let (out, report) = purify(&mut net, &mask, &PurificationConfig::zero()).unwrap();
        assert!(filter_removed(&out.layers[1], 2));
        assert_eq!(report.removals.len(), 1);
        assert_eq!(report.removals[0].reason, RemovalReason::MirrorOfRemoved);
    }

    #[test]
    fn invalid_thresholds_are_rejected() {
        let mut net = small_net();
        let cfg = PurificationConfig { th2: 1.5, ..Default::default() };
        assert!(purify(&mut net, &PruneMask::dense(&small_net()), &cfg).is_err());
    }
}
