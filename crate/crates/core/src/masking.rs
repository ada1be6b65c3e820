//! Global top-k masks over encoder weights.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::net::Network;
use crate::saliency::{Method, ScoreVector};

/// Sparsity grid in percent used by the sweeps.
pub const DEFAULT_SPARSITY_GRID: [f64; 7] = [36.00, 47.52, 59.04, 66.42, 73.80, 78.52, 83.22];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    bits: Vec<bool>,
    /// Requested sparsity, stored as `f64` bits so the mask stays `Eq`.
    sparsity_bits: u64,
    pub method: Option<Method>,
    pub seed: u64,
}

impl PruneMask {
    pub fn ones(len: usize) -> Self {
        Self::from_bits(vec![true; len], 0.0)
    }

    pub fn from_bits(bits: Vec<bool>, sparsity: f64) -> Self {
        Self {
            bits,
            sparsity_bits: sparsity.to_bits(),
            method: None,
            seed: 0,
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn sparsity(&self) -> f64 {
        f64::from_bits(self.sparsity_bits)
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of pruned entries.
    pub fn realized_sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        1.0 - self.kept() as f64 / self.bits.len() as f64
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Layers of `net` whose weights are all pruned.
    pub fn collapsed_layers(&self, net: &Network) -> Vec<usize> {
        (0..net.layers().len())
            .filter(|&l| self.bits[net.layer_range(l)].iter().all(|&b| !b))
            .collect()
    }

    /// Jaccard overlap of the kept sets.
    pub fn jaccard(&self, other: &PruneMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Run-length text: a header line, then runs such as `1x120 0x30`.
    pub fn to_rle(&self) -> String {
        let mut out = format!(
            "mask p={} q={} method={} seed={}\n",
            self.bits.len(),
            self.sparsity(),
            self.method.map_or("none", Method::name),
            self.seed
        );
        let mut runs = Vec::new();
        let mut i = 0;
        while i < self.bits.len() {
            let v = self.bits[i];
            let start = i;
            while i < self.bits.len() && self.bits[i] == v {
                i += 1;
            }
            runs.push(format!("{}x{}", v as u8, i - start));
        }
        let _ = writeln!(out, "{}", runs.join(" "));
        out
    }

    pub fn from_rle(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse("mask", "empty input"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("mask") {
            return Err(Error::parse("mask line 1", "missing 'mask' header"));
        }
        let (mut p, mut q, mut method, mut seed) = (None, 0.0, None, 0);
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::parse("mask line 1", format!("bad field '{f}'")))?;
            let bad = |e: String| Error::parse("mask line 1", e);
            match k {
                "p" => p = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "q" => q = v.parse::<f64>().map_err(|e| bad(e.to_string()))?,
                "method" if v != "none" => method = Some(v.parse::<Method>()?),
                "method" => {}
                "seed" => seed = v.parse::<u64>().map_err(|e| bad(e.to_string()))?,
                _ => return Err(bad(format!("unknown field '{k}'"))),
            }
        }
        let p = p.ok_or_else(|| Error::parse("mask line 1", "missing p"))?;
        let mut bits = Vec::with_capacity(p);
        for run in lines.flat_map(str::split_whitespace) {
            let (v, n) = run
                .split_once('x')
                .ok_or_else(|| Error::parse("mask runs", format!("bad run '{run}'")))?;
            let n: usize = n
                .parse()
                .map_err(|_| Error::parse("mask runs", format!("bad run '{run}'")))?;
            let v = match v {
                "1" => true,
                "0" => false,
                _ => return Err(Error::parse("mask runs", format!("bad run '{run}'"))),
            };
            bits.extend(std::iter::repeat_n(v, n));
        }
        if bits.len() != p {
            return Err(Error::parse("mask runs", format!("runs cover {} of {p}", bits.len())));
        }
        Ok(Self {
            bits,
            sparsity_bits: q.to_bits(),
            method,
            seed,
        })
    }
}

/// Number of weights kept at sparsity `q`: `⌈(1 − q)·p⌉`, with products that
/// land within rounding noise of an integer snapped to it.
pub fn keep_count(p: usize, q: f64) -> usize {
    let x = (1.0 - q) * p as f64;
    let r = x.round();
    let kept = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    };
    (kept.max(0.0) as usize).min(p)
}

/// Parameter indices ordered from most to least worth keeping; ties keep the
/// lower index first.
pub fn keep_order(scores: &ScoreVector) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let v = &scores.values;
    if scores.keep_highest() {
        order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    } else {
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    }
    order
}

/// Keeps the `⌈(1 − q)·p⌉` best-scoring weights globally.
pub fn topk_mask(scores: &ScoreVector, q: f64) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("sparsity {q} must lie in [0, 1)")));
    }
    let p = scores.len();
    let k = keep_count(p, q);
    let mut bits = vec![false; p];
    for &j in keep_order(scores).iter().take(k) {
        bits[j] = true;
    }
    let mut mask = PruneMask::from_bits(bits, q);
    mask.method = Some(scores.method);
    mask.seed = scores.seed;
    Ok(mask)
}

/// `W ⊙ c`; heads are untouched.
pub fn apply_mask(net: &Network, mask: &PruneMask) -> Result<Network> {
    if mask.len() != net.param_count() {
        return Err(Error::dim("mask length", net.param_count(), mask.len()));
    }
    let mut out = net.clone();
    for (w, &keep) in out.weights_mut().iter_mut().zip(mask.bits()) {
        if !keep {
            *w = 0.0;
        }
    }
    Ok(out)
}

/// Fraction of encoder weights that are exactly zero.
pub fn measured_sparsity(net: &Network) -> f64 {
    let p = net.param_count();
    net.weights().iter().filter(|&&w| w == 0.0).count() as f64 / p as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Head;
    use crate::saliency::score_magnitude;
    use proptest::prelude::*;

    fn scores(values: Vec<f64>) -> ScoreVector {
        score_magnitude(&values.iter().map(|v: &f64| v.abs().sqrt()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_sparsity_keeps_everything() {
        let m = topk_mask(&scores(vec![1.0, 0.0, 3.0]), 0.0).unwrap();
        assert_eq!(m.bits(), &[true, true, true]);
    }

    #[test]
    fn half_sparsity_keeps_top_two() {
        let m = topk_mask(&scores(vec![1.0, 2.0, 3.0, 4.0]), 0.5).unwrap();
        assert_eq!(m.bits(), &[false, false, true, true]);
    }

    #[test]
    fn grid_count_on_ten_thousand() {
        assert_eq!(keep_count(10_000, 0.6642), 3358);
        let s = scores((0..10_000).map(|i| i as f64).collect());
        assert_eq!(topk_mask(&s, 0.6642).unwrap().kept(), 3358);
    }

    #[test]
    fn full_sparsity_is_rejected() {
        assert!(topk_mask(&scores(vec![1.0]), 1.0).is_err());
        assert!(topk_mask(&scores(vec![1.0]), -0.1).is_err());
    }

    #[test]
    fn ties_keep_lowest_index() {
        let m = topk_mask(&scores(vec![1.0, 1.0, 1.0, 1.0]), 0.5).unwrap();
        assert_eq!(m.bits(), &[true, true, false, false]);
    }

    #[test]
    fn keep_lowest_direction() {
        let mut s = scores(vec![1.0, 2.0, 3.0, 4.0]);
        s.method = Method::Grasp;
        let m = topk_mask(&s, 0.5).unwrap();
        assert_eq!(m.bits(), &[true, true, false, false]);
    }

    fn small_net() -> Network {
        let mut net = Network::mlp(&[2, 3, 2]).unwrap();
        net.set_weights((1..=12).map(|v| v as f64 * 0.1).collect()).unwrap();
        net.set_head(0, Head::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        net
    }

    #[test]
    fn apply_mask_cases() {
        let net = small_net();
        let same = apply_mask(&net, &PruneMask::ones(12)).unwrap();
        assert_eq!(same, net);
        let mut bits = vec![false; 12];
        bits[4] = true;
        let one = apply_mask(&net, &PruneMask::from_bits(bits, 11.0 / 12.0)).unwrap();
        assert_eq!(one.weights().iter().filter(|&&w| w != 0.0).count(), 1);
        assert_eq!(one.heads(), net.heads());
        assert!(apply_mask(&net, &PruneMask::ones(3)).is_err());
    }

    #[test]
    fn masking_is_idempotent_and_sparsity_consistent() {
        let net = small_net();
        assert_eq!(measured_sparsity(&net), 0.0);
        let s = score_magnitude(net.weights()).unwrap();
        let m = topk_mask(&s, 0.5).unwrap();
        let once = apply_mask(&net, &m).unwrap();
        let twice = apply_mask(&once, &m).unwrap();
        assert_eq!(once, twice);
        assert!(measured_sparsity(&once) >= 0.5);
        assert_eq!(measured_sparsity(&once), m.realized_sparsity());
    }

    #[test]
    fn collapsed_layers_are_reported() {
        let net = small_net();
        let mut bits = vec![false; 12];
        bits[7] = true;
        let m = PruneMask::from_bits(bits, 0.9);
        assert_eq!(m.collapsed_layers(&net), vec![0]);
    }

    #[test]
    fn rle_round_trip_and_errors() {
        let mut m = PruneMask::from_bits(vec![true, true, false, true, false, false], 0.5);
        m.method = Some(Method::BlockHessian);
        m.seed = 7;
        let text = m.to_rle();
        assert!(text.ends_with("1x2 0x1 1x1 0x2\n"));
        assert_eq!(PruneMask::from_rle(&text).unwrap(), m);
        assert!(PruneMask::from_rle("mask p=3 q=0\n1x2\n").is_err());
        assert!(PruneMask::from_rle("nope").is_err());
    }

    proptest! {
        #[test]
        fn masks_are_nested_and_exact(values in prop::collection::vec(-5.0f64..5.0, 1..200),
                                      q1 in 0.0f64..0.95, dq in 0.0f64..0.5) {
            let q2 = (q1 + dq).min(0.99);
            let s = ScoreVector { method: Method::Snip, values, source_task: None, seed: 0 };
            let m1 = topk_mask(&s, q1).unwrap();
            let m2 = topk_mask(&s, q2).unwrap();
            for (a, b) in m1.bits().iter().zip(m2.bits()) {
                prop_assert!(!b || *a);
            }
            let p = s.len() as f64;
            prop_assert!((m1.kept() as f64 / p - (1.0 - q1)).abs() <= 1.0 / p + 1e-12);
            prop_assert_eq!(topk_mask(&s, q1).unwrap(), m1);
        }
    }
}
