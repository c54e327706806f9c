use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::heads;
use super::ModelConfig;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{softplus, softplus_inverse, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Glorot,
    Zeros,
    Ones,
    /// Raw value whose softplus is 1.
    SoftplusOne,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

fn spec(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        rows,
        cols,
        init,
    }
}

/// Declaration order of every learnable array for `cfg`.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let n = cfg.num_objects;
    let f = cfg.feature_dim;
    let h = cfg.hidden_dim;
    let mut out = vec![
        spec("adj.v1", n, n, Init::Glorot),
        spec("adj.v2", n, n, Init::Glorot),
        spec("edge.a_raw", 1, 1, Init::SoftplusOne),
    ];
    for l in 0..cfg.gcn_layers {
        let fan_in = if l == 0 { f } else { h };
        out.push(spec(format!("gcn.{l}.w"), fan_in, h, Init::Glorot));
    }
    out.push(spec("spatial_lstm.wx", h, 4 * h, Init::Glorot));
    out.push(spec("spatial_lstm.wh", h, 4 * h, Init::Glorot));
    out.push(spec("spatial_lstm.b", 1, 4 * h, Init::Zeros));
    out.push(spec("fuse.w", h + f, h, Init::Glorot));
    out.push(spec("fuse.b", 1, h, Init::Zeros));
    for (i, _) in cfg.dilations.iter().enumerate() {
        for k in 0..cfg.kernel_size {
            out.push(spec(format!("dilated.{i}.k{k}"), h, h, Init::Glorot));
        }
    }
    out.push(spec("dilated.ln_gain", 1, h, Init::Ones));
    out.push(spec("dilated.ln_bias", 1, h, Init::Zeros));
    for (name, rows, cols, init) in heads::param_shapes(cfg.temporal_head, h) {
        out.push(spec(name, rows, cols, init));
    }
    out.push(spec("cls.w", h, 2, Init::Glorot));
    out.push(spec("cls.b", 1, 2, Init::Zeros));
    out
}

/// All learnable arrays, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub values: Vec<Matrix>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut names = Vec::new();
        let mut values = Vec::new();
        for s in param_specs(cfg) {
            let m = match s.init {
                Init::Zeros => Matrix::zeros(s.rows, s.cols),
                Init::Ones => Matrix::filled(s.rows, s.cols, 1.0),
                Init::SoftplusOne => Matrix::filled(s.rows, s.cols, softplus_inverse(1.0)),
                Init::Glorot => {
                    let limit = (6.0 / (s.rows + s.cols) as f64).sqrt();
                    Matrix::from_vec(
                        s.rows,
                        s.cols,
                        (0..s.rows * s.cols)
                            .map(|_| rng.random_range(-limit..limit))
                            .collect(),
                    )
                }
            };
            names.push(s.name);
            values.push(m);
        }
        Ok(ModelParams { names, values })
    }

    /// Checks names and shapes against what `cfg` declares.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.values.len() || self.names.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                specs.len(),
                self.values.len()
            )));
        }
        for ((s, name), v) in specs.iter().zip(&self.names).zip(&self.values) {
            if &s.name != name || (s.rows, s.cols) != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match {} ({}, {})",
                    v.shape(),
                    s.name,
                    s.rows,
                    s.cols
                )));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Effective (positive) edge-mixing parameter.
    pub fn edge_a(&self) -> f64 {
        softplus(self.get("edge.a_raw").expect("edge.a_raw").data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::all_finite)
    }

    /// Pushes every array as a leaf; returns handles in declaration order.
    pub(crate) fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            names: self.names.clone(),
            vars: self.values.iter().map(|m| tape.leaf(m.clone())).collect(),
        }
    }
}

pub(crate) struct BoundParams {
    names: Vec<String>,
    pub vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }
}
