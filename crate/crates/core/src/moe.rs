//! Modality-specialized mixture of experts.
//!
//! Each stage feature map is routed once per image: the spatially pooled
//! feature is projected by a bias-free router, compared to learnable expert
//! embeddings by cosine similarity, and turned into a softmax distribution.
//! The `k` most probable experts (1x1 convolutions) are evaluated and summed
//! with their raw softmax probabilities; all other experts contribute zero.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::layers::Conv2d;
use crate::params::{Init, ParamStore};
use crate::{Error, Result};

/// Squared norms at or below this value are treated as zero when routing.
const NORM_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub channels: usize,
    pub embed_dim: usize,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config(format!(
                "moe sizes must be positive: {self:?}"
            )));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "moe top_k must be in 1..={}, got {}",
                self.num_experts, self.top_k
            )));
        }
        Ok(())
    }
}

/// How the 1x1 expert kernels start out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExpertInit {
    Identity,
    NearIdentity { noise: f64 },
    Kaiming,
}

impl Default for ExpertInit {
    fn default() -> Self {
        ExpertInit::NearIdentity { noise: 0.02 }
    }
}

/// Experts chosen for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub indices: Vec<usize>,
    /// Softmax probabilities of the selected experts, in selection order.
    pub weights: Vec<f64>,
}

impl GateDecision {
    /// Dense length-`num_experts` gate vector with unselected entries zero.
    pub fn dense(&self, num_experts: usize) -> Vec<f64> {
        let mut g = vec![0.0; num_experts];
        for (i, w) in self.indices.iter().zip(&self.weights) {
            g[*i] = *w;
        }
        g
    }
}

/// Output of a routed forward pass.
#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub output: Tensor,
    pub decisions: Vec<GateDecision>,
    /// Full softmax distribution `(batch, num_experts)`, still attached to the graph.
    pub probabilities: Tensor,
}

pub struct MoeLayer {
    config: MoeConfig,
    /// `(embed_dim, num_experts)`, one embedding per column.
    embeddings: Tensor,
    /// `(embed_dim, channels)`, no bias.
    router: Tensor,
    experts: Vec<Conv2d>,
    fallbacks: AtomicUsize,
}

impl std::fmt::Debug for MoeLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MoeLayer")
            .field("config", &self.config)
            .field("fallbacks", &self.fallback_count())
            .finish()
    }
}

impl MoeLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: MoeConfig,
        init: ExpertInit,
    ) -> Result<Self> {
        config.validate()?;
        let (m, c, d) = (config.num_experts, config.channels, config.embed_dim);

        let mut emb = store.normal(d * m, 1.0);
        for col in 0..m {
            loop {
                let norm = (0..d).map(|r| emb[r * m + col].powi(2)).sum::<f64>().sqrt();
                if norm > 0.0 && norm.is_finite() {
                    for r in 0..d {
                        emb[r * m + col] /= norm;
                    }
                    break;
                }
                let fresh = store.normal(d, 1.0);
                for r in 0..d {
                    emb[r * m + col] = fresh[r];
                }
            }
        }
        let embeddings = store.create(&format!("{name}.embeddings"), &[d, m], Init::Values(emb))?;
        let router = store.create(
            &format!("{name}.router"),
            &[d, c],
            Init::Normal {
                std: 1.0 / (c as f64).sqrt(),
            },
        )?;

        let mut experts = Vec::with_capacity(m);
        for e in 0..m {
            let prefix = format!("{name}.expert{e}");
            let kernel = match init {
                ExpertInit::Identity => Init::Values(identity(c)),
                ExpertInit::NearIdentity { noise } => {
                    let mut k = identity(c);
                    for (v, n) in k.iter_mut().zip(store.normal(c * c, noise)) {
                        *v += n;
                    }
                    Init::Values(k)
                }
                ExpertInit::Kaiming => Init::Kaiming { fan_in: c },
            };
            let weight = store.create(&format!("{prefix}.weight"), &[c, c, 1, 1], kernel)?;
            let bias = store.create(&format!("{prefix}.bias"), &[c], Init::Zeros)?;
            experts.push(Conv2d::from_parts(weight, Some(bias), 1, 0));
        }
        Ok(Self {
            config,
            embeddings,
            router,
            experts,
            fallbacks: AtomicUsize::new(0),
        })
    }

    /// Assembles a layer from explicit tensors.
    pub fn from_parts(
        config: MoeConfig,
        embeddings: Tensor,
        router: Tensor,
        experts: Vec<Conv2d>,
    ) -> Result<Self> {
        config.validate()?;
        let (m, c, d) = (config.num_experts, config.channels, config.embed_dim);
        if embeddings.dims() != [d, m] || router.dims() != [d, c] || experts.len() != m {
            return Err(Error::Shape(format!(
                "moe parts do not match {config:?}: embeddings {:?}, router {:?}, {} experts",
                embeddings.dims(),
                router.dims(),
                experts.len()
            )));
        }
        Ok(Self {
            config,
            embeddings,
            router,
            experts,
            fallbacks: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &MoeConfig {
        &self.config
    }

    pub fn expert(&self, index: usize) -> &Conv2d {
        &self.experts[index]
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn router(&self) -> &Tensor {
        &self.router
    }

    /// Number of images routed through the zero-norm fallback so far.
    pub fn fallback_count(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    fn check_input(&self, feature: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let dims = feature
            .dims4()
            .map_err(|_| Error::Shape(format!("moe expects NCHW input, got {:?}", feature.dims())))?;
        if dims.1 != self.config.channels {
            return Err(Error::Shape(format!(
                "moe configured for {} channels, feature has {}",
                self.config.channels, dims.1
            )));
        }
        Ok(dims)
    }

    /// Softmax over cosine scores, shape `(batch, num_experts)`.
    pub fn probabilities(&self, feature: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = self.check_input(feature)?;
        let pooled = feature.reshape((b, c, ()))?.mean(D::Minus1)?;
        let projected = pooled.matmul(&self.router.t()?)?;
        let dots = projected.matmul(&self.embeddings)?;

        let sq = projected.sqr()?.sum_keepdim(1)?;
        let zero_rows = sq
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .into_iter()
            .filter(|v| *v <= NORM_FLOOR)
            .count();
        if zero_rows > 0 {
            self.fallbacks.fetch_add(zero_rows, Ordering::Relaxed);
            log::debug!("moe routing fell back to uniform scores for {zero_rows} zero-norm inputs");
        }
        // A zero projection has zero dot products, so the floor keeps those
        // scores at exactly 0 (uniform softmax) and the backward pass finite.
        let v_norm = (sq + NORM_FLOOR)?.sqrt()?;
        let e_norm = self.embeddings.sqr()?.sum_keepdim(0)?.sqrt()?;
        let scores = dots.broadcast_div(&v_norm.broadcast_mul(&e_norm)?)?;
        Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
    }

    pub fn gate(&self, feature: &Tensor) -> Result<Vec<GateDecision>> {
        let probs = self.probabilities(feature)?;
        select_top_k(&probs, self.config.top_k)
    }

    /// Sparse routed forward: only selected experts run, on only the images
    /// that selected them.
    pub fn forward(&self, feature: &Tensor) -> Result<MoeOutput> {
        let probabilities = self.probabilities(feature)?;
        let decisions = select_top_k(&probabilities, self.config.top_k)?;

        let mut output = feature.zeros_like()?;
        for (m, expert) in self.experts.iter().enumerate() {
            let rows: Vec<u32> = decisions
                .iter()
                .enumerate()
                .filter(|(_, d)| d.indices.contains(&m))
                .map(|(b, _)| b as u32)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len();
            let idx = Tensor::from_vec(rows, n, feature.device())?;
            let sub = feature.index_select(&idx, 0)?;
            let weight = probabilities
                .index_select(&idx, 0)?
                .narrow(1, m, 1)?
                .reshape((n, 1, 1, 1))?;
            let routed = expert.forward(&sub)?.broadcast_mul(&weight)?;
            output = output.index_add(&idx, &routed, 0)?;
        }
        Ok(MoeOutput {
            output,
            decisions,
            probabilities,
        })
    }
}

fn identity(c: usize) -> Vec<f64> {
    let mut k = vec![0.0; c * c];
    for i in 0..c {
        k[i * c + i] = 1.0;
    }
    k
}

/// Top-k per row, ties broken towards the lower expert index.
pub fn select_top_k(probabilities: &Tensor, k: usize) -> Result<Vec<GateDecision>> {
    let rows = probabilities.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    rows.into_iter()
        .map(|p| {
            if k == 0 || k > p.len() {
                return Err(Error::Config(format!(
                    "top_k {k} out of range for {} experts",
                    p.len()
                )));
            }
            let mut order: Vec<usize> = (0..p.len()).collect();
            // Stable sort keeps index order among exact ties.
            order.sort_by(|a, b| p[*b].total_cmp(&p[*a]));
            order.truncate(k);
            let weights = order.iter().map(|i| p[*i]).collect();
            Ok(GateDecision {
                indices: order,
                weights,
            })
        })
        .collect()
}

/// Per-expert selection frequency: the fraction of decisions that selected
/// each expert. Frequencies sum to `k`. An empty slice yields all zeros.
pub fn load_balance_stats(decisions: &[GateDecision], num_experts: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_experts];
    for d in decisions {
        for &i in &d.indices {
            if i < num_experts {
                counts[i] += 1;
            }
        }
    }
    if decisions.is_empty() {
        return vec![0.0; num_experts];
    }
    let n = decisions.len() as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn layer(m: usize, k: usize, c: usize, init: ExpertInit, seed: u64) -> (ParamStore, MoeLayer) {
        let mut store = ParamStore::new(seed, DType::F64);
        let cfg = MoeConfig {
            num_experts: m,
            top_k: k,
            channels: c,
            embed_dim: 8,
        };
        let layer = MoeLayer::new(&mut store, "moe", cfg, init).unwrap();
        (store, layer)
    }

    #[test]
    fn single_expert_takes_full_weight() {
        let (_s, l) = layer(1, 1, 3, ExpertInit::Kaiming, 0);
        let d = l.gate(&random(&[2, 3, 4, 4], 1)).unwrap();
        for g in d {
            assert_eq!(g.indices, vec![0]);
            assert_eq!(g.weights, vec![1.0]);
        }
    }

    #[test]
    fn identity_single_expert_is_exact_noop() {
        let (_s, l) = layer(1, 1, 4, ExpertInit::Identity, 0);
        let x = random(&[2, 4, 5, 5], 2).to_dtype(DType::F32).unwrap();
        // Rebuild in f32 to exercise the training dtype.
        let mut store = ParamStore::new(0, DType::F32);
        let l32 = MoeLayer::new(&mut store, "m", l.config().clone(), ExpertInit::Identity).unwrap();
        let y = l32.forward(&x).unwrap().output;
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn orthonormal_embeddings_pick_matching_expert() {
        let dev = Device::Cpu;
        let cfg = MoeConfig {
            num_experts: 4,
            top_k: 2,
            channels: 4,
            embed_dim: 4,
        };
        let eye = Tensor::eye(4, DType::F64, &dev).unwrap();
        let experts = (0..4)
            .map(|_| {
                Conv2d::from_parts(eye.reshape((4, 4, 1, 1)).unwrap(), None, 1, 0)
            })
            .collect();
        let l = MoeLayer::from_parts(cfg, eye.clone(), eye.clone(), experts).unwrap();
        // Every pixel equals e_2, so the pooled projection is exactly column 2.
        let feature = Tensor::new(&[0.0f64, 0.0, 1.0, 0.0], &dev)
            .unwrap()
            .reshape((1, 4, 1, 1))
            .unwrap()
            .broadcast_as((1, 4, 3, 3))
            .unwrap()
            .contiguous()
            .unwrap();
        let d = &l.gate(&feature).unwrap()[0];
        let e = std::f64::consts::E;
        assert_eq!(d.indices, vec![2, 0]);
        assert!((d.weights[0] - e / (e + 3.0)).abs() < 1e-12);
        assert!((d.weights[0] - 0.4754).abs() < 5e-5);
        assert!((d.weights[1] - 1.0 / (e + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_feature_falls_back_to_uniform() {
        let (_s, l) = layer(4, 2, 3, ExpertInit::default(), 4);
        let zero = Tensor::zeros((2, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let out = l.forward(&zero).unwrap();
        for d in &out.decisions {
            assert_eq!(d.indices, vec![0, 1]);
            for w in &d.weights {
                assert!((w - 0.25).abs() < 1e-15);
            }
        }
        assert_eq!(l.fallback_count(), 2);
        let s = out.output.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn zero_feature_backward_is_finite() {
        let (store, l) = layer(4, 2, 3, ExpertInit::default(), 4);
        let zero = Var::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let y = l.forward(&zero).unwrap().output.sum_all().unwrap();
        let grads = y.backward().unwrap();
        for (_, v) in store.iter() {
            if let Some(g) = grads.get(v) {
                let s = g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(s.is_finite());
            }
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let (_s, l) = layer(4, 2, 3, ExpertInit::default(), 0);
        let bad = random(&[1, 5, 2, 2], 0);
        assert!(matches!(l.forward(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_configs() {
        let base = MoeConfig {
            num_experts: 4,
            top_k: 2,
            channels: 8,
            embed_dim: 8,
        };
        assert!(base.validate().is_ok());
        assert!(MoeConfig { top_k: 5, ..base.clone() }.validate().is_err());
        assert!(MoeConfig { top_k: 0, ..base.clone() }.validate().is_err());
        assert!(MoeConfig { num_experts: 0, ..base }.validate().is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let p = Tensor::new(&[[0.25f64, 0.25, 0.25, 0.25], [0.1, 0.3, 0.3, 0.3]], &Device::Cpu)
            .unwrap();
        let d = select_top_k(&p, 2).unwrap();
        assert_eq!(d[0].indices, vec![0, 1]);
        assert_eq!(d[1].indices, vec![1, 2]);
    }

    #[test]
    fn balance_stats_examples() {
        let a = GateDecision {
            indices: vec![0, 1],
            weights: vec![0.4, 0.3],
        };
        let b = GateDecision {
            indices: vec![2, 3],
            weights: vec![0.4, 0.3],
        };
        assert_eq!(load_balance_stats(std::slice::from_ref(&a), 4), vec![1.0, 1.0, 0.0, 0.0]);
        // Normalised per decision, so the histogram always sums to k.
        let two = load_balance_stats(&[a, b], 4);
        assert_eq!(two, vec![0.5, 0.5, 0.5, 0.5]);
        assert_eq!(two.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn random_init_uses_every_expert() {
        // Monte-Carlo over 1000 random features at initialization.
        let (_s, l) = layer(4, 2, 16, ExpertInit::default(), 21);
        let mut decisions = Vec::new();
        for seed in 0..10 {
            decisions.extend(l.gate(&random(&[100, 16, 2, 2], 100 + seed)).unwrap());
        }
        let freq = load_balance_stats(&decisions, 4);
        assert!((freq.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!(freq.iter().all(|f| *f > 0.0), "{freq:?}");
    }
}
