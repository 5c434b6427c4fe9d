use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{Graph, Tensor, Var};

/// Half-width of the uniform weight initialization.
pub const INIT_SCALE: f64 = 0.08;

macro_rules! param_set {
    ($($name:ident),* $(,)?) => {
        /// Every trainable tensor of the model. Weights are shared across
        /// refinement rounds.
        #[derive(Debug, Clone, PartialEq)]
        pub struct GoseParams {
            $(pub $name: Tensor,)*
        }

        /// Graph handles for a registered [`GoseParams`].
        #[derive(Debug, Clone, Copy)]
        pub struct ParamVars {
            $(pub $name: Var,)*
        }

        impl GoseParams {
            /// Parameter names in canonical (checkpoint) order.
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn tensors(&self) -> Vec<&Tensor> {
                vec![$(&self.$name),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
                vec![$(&mut self.$name),*]
            }

            pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
                let count = tensors.len();
                let mut it = tensors.into_iter();
                let mut next = || it.next().ok_or_else(|| Error::Contract(format!(
                    "expected {} parameter tensors, got {count}",
                    Self::NAMES.len()
                )));
                let params = GoseParams { $($name: next()?,)* };
                if count != Self::NAMES.len() {
                    return Err(Error::Contract(format!(
                        "expected {} parameter tensors, got {count}",
                        Self::NAMES.len()
                    )));
                }
                Ok(params)
            }

            /// Add every tensor to `g` as a trainable leaf.
            pub fn register(&self, g: &mut Graph) -> ParamVars {
                ParamVars { $($name: g.param(self.$name.clone()),)* }
            }
        }

        impl ParamVars {
            pub fn from_vars(vars: &[Var]) -> Result<Self> {
                let mut it = vars.iter().copied();
                let mut next = || it.next().ok_or_else(|| Error::Contract(
                    "too few parameter vars".into()
                ));
                Ok(ParamVars { $($name: next()?,)* })
            }

            pub fn vars(&self) -> Vec<Var> {
                vec![$(self.$name),*]
            }
        }
    };
}

param_set!(
    tok_emb, bbox_proj, w_key, b_key, w_value, b_value, w1, w2, w_r, b_r, w_dir, w_dis, w_q, w_k,
    w_v, w_ks, w_vs, tokens, w_qt, w_kt, w_vt, w_g, b_g,
);

const BIASES: &[&str] = &["b_key", "b_value", "b_r", "b_g"];

impl GoseParams {
    /// Declared shape of every parameter, in [`GoseParams::NAMES`] order.
    pub fn shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
        let d = cfg.d_h;
        let names_and_shapes: Vec<(&str, Vec<usize>)> = vec![
            ("tok_emb", vec![cfg.vocab_size, 2 * d]),
            ("bbox_proj", vec![4, 2 * d]),
            ("w_key", vec![2 * d, d]),
            ("b_key", vec![d]),
            ("w_value", vec![2 * d, d]),
            ("b_value", vec![d]),
            ("w1", vec![d, 2, d]),
            ("w2", vec![d, 2]),
            ("w_r", vec![2, d]),
            ("b_r", vec![d]),
            ("w_dir", vec![1, d / 6]),
            ("w_dis", vec![1, d / 6]),
            ("w_q", vec![d, d]),
            ("w_k", vec![d, d]),
            ("w_v", vec![d, d]),
            ("w_ks", vec![d, d]),
            ("w_vs", vec![d, d]),
            ("tokens", vec![cfg.global_tokens, d]),
            ("w_qt", vec![d, d]),
            ("w_kt", vec![d, d]),
            ("w_vt", vec![d, d]),
            ("w_g", vec![2 * d, d]),
            ("b_g", vec![d]),
        ];
        debug_assert!(names_and_shapes
            .iter()
            .map(|(n, _)| *n)
            .eq(Self::NAMES.iter().copied()));
        names_and_shapes.into_iter().map(|(_, s)| s).collect()
    }

    /// Weights and global tokens uniform in `[-INIT_SCALE, INIT_SCALE]`,
    /// biases zero. Draws from the `"init"` substream of `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, "init");
        let tensors = Self::NAMES
            .iter()
            .zip(Self::shapes(cfg))
            .map(|(name, shape)| {
                let numel = shape.iter().product();
                let data = if BIASES.contains(name) {
                    vec![0.0; numel]
                } else {
                    (0..numel)
                        .map(|_| rng.gen_range(-INIT_SCALE..=INIT_SCALE))
                        .collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(tensors)
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::from_tensors(Self::shapes(cfg).iter().map(|s| Tensor::zeros(s)).collect())
            .expect("shape table matches field list")
    }

    pub fn zeros_like(&self) -> Self {
        Self::from_tensors(self.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect())
            .expect("same field list")
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        for ((name, t), shape) in Self::NAMES.iter().zip(self.tensors()).zip(Self::shapes(cfg)) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Validation(format!(
                    "parameter `{name}` has shape {:?}, config requires {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Gradients of the last backward pass, zero-filled for unused tensors.
    pub fn gradients(&self, g: &Graph, vars: &ParamVars) -> Self {
        let tensors = self
            .tensors()
            .into_iter()
            .zip(vars.vars())
            .map(|(t, v)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Self::from_tensors(tensors).expect("same field list")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_matches_declared_shapes() {
        let cfg = ModelConfig::default();
        let p = GoseParams::init(&cfg, 1).unwrap();
        p.check_shapes(&cfg).unwrap();
        assert!(p.b_g.data().iter().all(|&v| v == 0.0));
        assert!(p.w_q.data().iter().all(|v| v.abs() <= INIT_SCALE));
        assert_eq!(p, GoseParams::init(&cfg, 1).unwrap());
        assert_ne!(p, GoseParams::init(&cfg, 2).unwrap());
    }

    #[test]
    fn from_tensors_rejects_wrong_count() {
        assert!(GoseParams::from_tensors(vec![Tensor::scalar(0.0)]).is_err());
    }
}
