//! Parameter registry: the single source of truth for which tensors a
//! configuration owns, their shapes, and how each is initialized. Weight
//! initialization, parameter counting, checkpoint validation, and the
//! forward pass all consume the same enumeration, so they cannot drift
//! apart.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PbanError, Result};
use crate::tensor::{numel, Scalar, Tensor};

use super::config::{AttentionMode, PBANConfig, Variant};

/// Ordered parameter-path to tensor map. Holds every piece of model state,
/// including batch-norm running statistics; `is_trainable` separates the
/// optimizer's targets from carried state.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NamedWeights<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> NamedWeights<T> {
    pub fn new() -> Self {
        NamedWeights { map: BTreeMap::new() }
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.map.get(path)
    }

    /// Fetch a tensor that must exist; absence is a programming error
    /// surfaced as a contract violation.
    pub fn require(&self, path: &str) -> Result<&Tensor<T>> {
        self.map
            .get(path)
            .ok_or_else(|| PbanError::Contract(format!("missing parameter {path}")))
    }

    pub fn insert(&mut self, path: String, value: Tensor<T>) {
        self.map.insert(path, value);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Paths in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn cast<U: Scalar>(&self) -> NamedWeights<U> {
        NamedWeights {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }
}

/// Running statistics are carried state, not optimizer targets.
pub fn is_trainable(path: &str) -> bool {
    !path.ends_with(".running_mean") && !path.ends_with(".running_var")
}

/// How a tensor starts out.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)].
    FanInUniform(usize),
    Zeros,
    Ones,
    /// Offset-predictor bias: zero for the displacement channels, then a
    /// constant large enough that sigmoid saturates to exactly 1 for the
    /// modulation channels.
    OffsetPredictorBias { offset_channels: usize },
}

/// Modulation bias at init; sigmoid(40) rounds to exactly 1.0 in both f32
/// and f64, which makes the fresh deformable unit coincide with a plain
/// convolution bit-for-bit.
pub const MODULATION_BIAS_INIT: f64 = 40.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_spec(path: String, c_out: usize, c_in_per_group: usize, k: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            path: format!("{path}.weight"),
            shape: vec![c_out, c_in_per_group, k, k],
            init: Init::FanInUniform(c_in_per_group * k * k),
        },
        ParamSpec {
            path: format!("{path}.bias"),
            shape: vec![c_out],
            init: Init::Zeros,
        },
    ]
}

fn linear_spec(path: String, d_out: usize, d_in: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            path: format!("{path}.weight"),
            shape: vec![d_out, d_in],
            init: Init::FanInUniform(d_in),
        },
        ParamSpec {
            path: format!("{path}.bias"),
            shape: vec![d_out],
            init: Init::Zeros,
        },
    ]
}

/// Branch prefixes of a configuration: "hr" and "sr" for the two-branch
/// variant, a single unprefixed branch otherwise.
pub fn branches(cfg: &PBANConfig) -> &'static [&'static str] {
    match cfg.variant {
        Variant::Fr => &["hr", "sr"],
        Variant::Nr => &[""],
    }
}

pub(crate) fn join(branch: &str, rest: &str) -> String {
    if branch.is_empty() {
        rest.to_string()
    } else {
        format!("{branch}.{rest}")
    }
}

/// Whether a branch computes its own Key path (Key conv plus deformable
/// unit). In the one-way modes a single branch's Key serves both sides, so
/// the other branch carries no Key weights at all.
pub fn branch_has_key(cfg: &PBANConfig, branch: &str) -> bool {
    match cfg.attention_mode {
        AttentionMode::HrToSr => branch != "sr",
        AttentionMode::SrToHr => branch != "hr",
        _ => true,
    }
}

/// Every tensor of the model in deterministic construction order. The
/// initialization RNG draws in exactly this order.
pub fn enumerate(cfg: &PBANConfig) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let mut out = Vec::new();
    for &br in branches(cfg) {
        let enc = join(br, "encoder");
        out.extend(conv_spec(format!("{enc}.conv"), c, 3, 3));
        for (name, init) in [
            ("gamma", Init::Ones),
            ("beta", Init::Zeros),
            ("running_mean", Init::Zeros),
            ("running_var", Init::Ones),
        ] {
            out.push(ParamSpec {
                path: format!("{enc}.bn.{name}"),
                shape: vec![c],
                init,
            });
        }
        for b in 0..cfg.blocks {
            let atten = join(br, &format!("block{b}.biatten"));
            out.extend(conv_spec(format!("{atten}.q_conv"), c, c, 3));
            if branch_has_key(cfg, br) {
                out.extend(conv_spec(format!("{atten}.k_conv"), c, c, 3));
                let cg = cfg.gmdc_group_width();
                for (gi, &edge) in cfg.gmdc_kernels.iter().enumerate() {
                    let taps = edge * edge;
                    let p = cfg.offset_predictor_kernel;
                    out.push(ParamSpec {
                        path: format!("{atten}.gmdc.group{gi}.offset_conv.weight"),
                        shape: vec![3 * taps, cg, p, p],
                        init: Init::Zeros,
                    });
                    out.push(ParamSpec {
                        path: format!("{atten}.gmdc.group{gi}.offset_conv.bias"),
                        shape: vec![3 * taps],
                        init: Init::OffsetPredictorBias { offset_channels: 2 * taps },
                    });
                    out.extend(conv_spec(
                        format!("{atten}.gmdc.group{gi}.deform"),
                        cg,
                        cg,
                        edge,
                    ));
                }
                out.extend(conv_spec(format!("{atten}.gmdc.fuse"), c, c, 1));
            }
            out.extend(conv_spec(format!("{atten}.v_conv"), c, c, 3));

            let subec = join(br, &format!("block{b}.subec"));
            let s = cfg.subec_upscale;
            out.extend(conv_spec(format!("{subec}.px_conv1"), c / 2, c, 3));
            out.extend(conv_spec(format!("{subec}.px_conv2"), s * s, c / 2, 3));
            out.extend(conv_spec(
                format!("{subec}.ch_expand"),
                c * s,
                c / cfg.subec_groups,
                1,
            ));
            out.extend(conv_spec(format!("{subec}.ch_fuse"), c, c * s, 1));
        }
        let head = join(br, "head");
        out.extend(linear_spec(format!("{head}.fc1"), cfg.head_dims[1], cfg.head_dims[0]));
        out.extend(linear_spec(format!("{head}.fc2"), cfg.head_dims[2], cfg.head_dims[1]));
    }
    out.extend(linear_spec("fusion.fc1".into(), cfg.fusion_dims[1], cfg.fusion_dims[0]));
    out.extend(linear_spec("fusion.fc2".into(), cfg.fusion_dims[2], cfg.fusion_dims[1]));
    out
}

/// Fresh weights for a configuration. Fan-in draws come from a single
/// seeded stream in enumeration order, so equal seeds give bitwise equal
/// weights; every bias starts at zero except the modulation part of the
/// offset-predictor bias, which saturates its sigmoid at exactly 1.
pub fn init_weights<T: Scalar>(cfg: &PBANConfig, seed: u64) -> Result<NamedWeights<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = NamedWeights::new();
    for spec in enumerate(cfg) {
        let tensor = match spec.init {
            Init::FanInUniform(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&spec.shape, |_| {
                    T::from_f64(rng.gen_range(-bound..bound))
                })
            }
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
            Init::OffsetPredictorBias { offset_channels } => Tensor::from_fn(&spec.shape, |i| {
                if i < offset_channels {
                    T::zero()
                } else {
                    T::from_f64(MODULATION_BIAS_INIT)
                }
            }),
        };
        weights.insert(spec.path, tensor);
    }
    Ok(weights)
}

/// Checks that a weight map carries exactly the tensors the configuration
/// expects, shape for shape.
pub fn verify_weights<T: Scalar>(cfg: &PBANConfig, weights: &NamedWeights<T>) -> Result<()> {
    let specs = enumerate(cfg);
    for spec in &specs {
        match weights.get(&spec.path) {
            None => {
                return Err(PbanError::Data(format!(
                    "weights are missing parameter {}",
                    spec.path
                )))
            }
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(PbanError::Data(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.path,
                    t.shape(),
                    spec.shape
                )))
            }
            Some(_) => {}
        }
    }
    if weights.len() != specs.len() {
        let expected: std::collections::BTreeSet<&str> =
            specs.iter().map(|s| s.path.as_str()).collect();
        let extra = weights
            .iter()
            .map(|(p, _)| p.as_str())
            .find(|p| !expected.contains(p))
            .unwrap_or("?");
        return Err(PbanError::Data(format!(
            "weights carry unexpected parameter {extra}"
        )));
    }
    Ok(())
}

/// Copies every "hr." tensor onto its "sr." counterpart so the two branches
/// compute identical functions. Exists for symmetry tests; trained models
/// keep the branches independent.
pub fn tie_branches<T: Scalar>(weights: &mut NamedWeights<T>) {
    let hr: Vec<(String, Tensor<T>)> = weights
        .iter()
        .filter(|(p, _)| p.starts_with("hr."))
        .map(|(p, t)| (p.clone(), t.clone()))
        .collect();
    for (path, tensor) in hr {
        weights.insert(format!("sr.{}", &path["hr.".len()..]), tensor);
    }
}

/// Element counts per top-level module (branch.component), the trainable
/// total, and the deformable-kernel-weight subtotal of a single
/// multi-kernel unit (the figure the grouped design trades against a
/// single wide kernel).
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ParamCount {
    pub total_trainable: usize,
    pub by_module: BTreeMap<String, usize>,
    pub gmdc_deform_kernel_weights: usize,
}

/// Key = branch plus first path component ("hr.block0", "fusion", ...).
fn module_key(path: &str) -> String {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.len() > 2 && (parts[0] == "hr" || parts[0] == "sr") {
        format!("{}.{}", parts[0], parts[1])
    } else {
        parts[0].to_string()
    }
}

pub fn param_count(cfg: &PBANConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let mut by_module: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    let mut gmdc_kernel = 0usize;
    for spec in enumerate(cfg) {
        if !is_trainable(&spec.path) {
            continue;
        }
        let n = numel(&spec.shape);
        total += n;
        *by_module.entry(module_key(&spec.path)).or_default() += n;
        // One unit's kernel-weight subtotal: count a single branch's first
        // block (all units share the count by construction).
        let first = branches(cfg)
            .iter()
            .map(|br| join(br, "block0.biatten.gmdc."))
            .find(|p| spec.path.starts_with(p.as_str()));
        if first.is_some() && spec.path.contains(".deform.weight") {
            gmdc_kernel += n;
        }
    }
    // Counted once per branch that has a key path in block 0; normalize to a
    // single unit.
    let key_branches = branches(cfg)
        .iter()
        .filter(|br| branch_has_key(cfg, br))
        .count();
    Ok(ParamCount {
        total_trainable: total,
        by_module,
        gmdc_deform_kernel_weights: gmdc_kernel / key_branches.max(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_gmdc_kernel_weight_count_matches_hand_derivation() {
        // C=64 split into two groups of 32, kernels 3 and 7:
        // 32*32*9 + 32*32*49 = 59392.
        let count = param_count(&PBANConfig::default()).unwrap();
        assert_eq!(count.gmdc_deform_kernel_weights, 59_392);
    }

    #[test]
    fn grouped_kernels_beat_a_single_wide_kernel() {
        let grouped = param_count(&PBANConfig::default())
            .unwrap()
            .gmdc_deform_kernel_weights;
        let single_7x7 = 64 * 64 * 49;
        assert!(grouped < single_7x7, "{grouped} vs {single_7x7}");
    }

    fn kernel_config(kernels: &[usize]) -> PBANConfig {
        PBANConfig {
            channels: 48,
            gmdc_kernels: kernels.to_vec(),
            gmdc_groups: kernels.len(),
            head_dims: vec![48 * 16, 512, 256],
            ..PBANConfig::default()
        }
    }

    #[test]
    fn gmdc_module_count_grows_with_the_kernel_list() {
        let lists: [&[usize]; 4] = [&[3], &[3, 5], &[3, 5, 7], &[3, 5, 7, 9]];
        let mut counts = Vec::new();
        for list in lists {
            let cfg = kernel_config(list);
            let n = param_count(&cfg)
                .unwrap()
                .by_module
                .get("hr.block0")
                .copied()
                .unwrap();
            counts.push(n);
        }
        for pair in counts.windows(2) {
            assert!(pair[0] < pair[1], "{counts:?} not strictly increasing");
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical_and_seeds_differ() {
        let cfg = PBANConfig::micro();
        let a: NamedWeights<f32> = init_weights(&cfg, 11).unwrap();
        let b: NamedWeights<f32> = init_weights(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c: NamedWeights<f32> = init_weights(&cfg, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_matches_enumeration_exactly() {
        let cfg = PBANConfig::micro();
        let w: NamedWeights<f64> = init_weights(&cfg, 0).unwrap();
        verify_weights(&cfg, &w).unwrap();
        let specs = enumerate(&cfg);
        assert_eq!(w.len(), specs.len());
    }

    #[test]
    fn offset_predictor_starts_silent_with_saturated_modulation() {
        let cfg = PBANConfig::micro();
        let w: NamedWeights<f64> = init_weights(&cfg, 0).unwrap();
        let wt = w.require("hr.block0.biatten.gmdc.group1.offset_conv.weight").unwrap();
        assert!(wt.as_slice().iter().all(|&v| v == 0.0));
        let bias = w.require("hr.block0.biatten.gmdc.group1.offset_conv.bias").unwrap();
        // Kernel edge 7: 98 offset entries then 49 modulation entries.
        assert_eq!(bias.len(), 147);
        assert!(bias.as_slice()[..98].iter().all(|&v| v == 0.0));
        assert!(bias.as_slice()[98..].iter().all(|&v| v == MODULATION_BIAS_INIT));
    }

    #[test]
    fn one_way_modes_drop_the_unused_key_path() {
        let mut cfg = PBANConfig::micro();
        cfg.attention_mode = AttentionMode::HrToSr;
        let paths: Vec<String> = enumerate(&cfg).into_iter().map(|s| s.path).collect();
        assert!(paths.iter().any(|p| p == "hr.block0.biatten.k_conv.weight"));
        assert!(!paths.iter().any(|p| p.starts_with("sr.block0.biatten.k_conv")));
        assert!(!paths.iter().any(|p| p.starts_with("sr.block0.biatten.gmdc")));

        cfg.attention_mode = AttentionMode::SrToHr;
        let paths: Vec<String> = enumerate(&cfg).into_iter().map(|s| s.path).collect();
        assert!(paths.iter().any(|p| p == "sr.block0.biatten.k_conv.weight"));
        assert!(!paths.iter().any(|p| p.starts_with("hr.block0.biatten.gmdc")));
    }

    #[test]
    fn single_branch_paths_mirror_one_two_branch_trunk() {
        let mut nr = PBANConfig::micro();
        nr.variant = Variant::Nr;
        nr.attention_mode = AttentionMode::SelfAttention;
        nr.fusion_dims = vec![32, 16, 1];

        let mut fr_self = PBANConfig::micro();
        fr_self.attention_mode = AttentionMode::SelfAttention;

        let nr_paths: Vec<String> = enumerate(&nr)
            .into_iter()
            .map(|s| s.path)
            .filter(|p| !p.starts_with("fusion."))
            .collect();
        let hr_paths: Vec<String> = enumerate(&fr_self)
            .into_iter()
            .map(|s| s.path)
            .filter(|p| p.starts_with("hr."))
            .map(|p| p["hr.".len()..].to_string())
            .collect();
        assert_eq!(nr_paths, hr_paths);
    }
}
