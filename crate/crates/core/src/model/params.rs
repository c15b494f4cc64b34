use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Part of the attention block (Q/K/V/output projections).
    pub attention: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one transformer block inside the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub(crate) wte: usize,
    pub(crate) wpe: usize,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f, c) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_context);
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>, attention: bool| -> usize {
            let spec = TensorSpec {
                name,
                shape,
                offset,
                attention,
            };
            let at = offset;
            offset += spec.len();
            tensors.push(spec);
            at
        };
        let wte = add("wte".into(), vec![v, d], false);
        let wpe = add("wpe".into(), vec![c, d], false);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            blocks.push(BlockOffsets {
                ln1_g: add(p("ln1.g"), vec![d], false),
                ln1_b: add(p("ln1.b"), vec![d], false),
                wq: add(p("attn.wq"), vec![d, d], true),
                bq: add(p("attn.bq"), vec![d], true),
                wk: add(p("attn.wk"), vec![d, d], true),
                bk: add(p("attn.bk"), vec![d], true),
                wv: add(p("attn.wv"), vec![d, d], true),
                bv: add(p("attn.bv"), vec![d], true),
                wo: add(p("attn.wo"), vec![d, d], true),
                bo: add(p("attn.bo"), vec![d], true),
                ln2_g: add(p("ln2.g"), vec![d], false),
                ln2_b: add(p("ln2.b"), vec![d], false),
                w1: add(p("mlp.w1"), vec![d, f], false),
                b1: add(p("mlp.b1"), vec![f], false),
                w2: add(p("mlp.w2"), vec![f, d], false),
                b2: add(p("mlp.b2"), vec![d], false),
            });
        }
        let lnf_g = add("lnf.g".into(), vec![d], false);
        let lnf_b = add("lnf.b".into(), vec![d], false);
        Layout {
            tensors,
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            total: offset,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// All model weights in one flat buffer, addressed through [`Layout`].
/// The output projection is tied to the token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl Parameters {
    /// Gaussian init (std 0.02, residual projections scaled by
    /// `1/sqrt(2 * n_layers)`), unit layer-norm gains, zero biases.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        for t in &layout.tensors {
            let leaf = t.name.rsplit('.').next().unwrap_or(&t.name);
            let slice = &mut data[t.range()];
            match leaf {
                "g" => slice.fill(1.0),
                "wte" | "wpe" | "wq" | "wk" | "wv" | "w1" => {
                    let dist = Normal::new(0.0, std).unwrap();
                    slice.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
                }
                "wo" | "w2" => {
                    let dist = Normal::new(0.0, resid_std).unwrap();
                    slice.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
                }
                _ => {}
            }
        }
        Ok(Parameters {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.tensor(name).map(|t| &self.data[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.tensor(name)?.range();
        Some(&mut self.data[range])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for x in &self.data {
            h.update(x.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
