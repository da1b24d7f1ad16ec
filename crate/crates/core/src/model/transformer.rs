use serde::{Deserialize, Serialize};

use super::tensor::{log_softmax_row, Matrix, Tape, Var};
use super::{check_query, ModelError, TranslationModel, Vocab};
use crate::rng::PortableRng;
use crate::tokenizer::TokenSeq;

/// Shape and seed of the toy encoder-decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_heads: 2,
            ff_dim: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ff: Norm,
    ff: FeedForward,
}

/// Indices into the flat parameter list. Derived from config and vocab size
/// alone, so checkpoints only need to store the matrices in order.
#[derive(Debug, Clone)]
struct Layout {
    token_embedding: usize,
    position_embedding: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    out_w: usize,
    out_b: usize,
    shapes: Vec<(usize, usize, Init)>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f32),
    Zeros,
    Ones,
}

impl Layout {
    fn new(cfg: &ModelConfig, vocab_size: usize) -> Self {
        let d = cfg.embed_dim;
        let mut shapes = Vec::new();
        let mut add = |r: usize, c: usize, init: Init| {
            shapes.push((r, c, init));
            shapes.len() - 1
        };
        let w_std = |fan_in: usize| Init::Normal((1.0 / fan_in as f32).sqrt());
        let token_embedding = add(vocab_size, d, Init::Normal(0.5));
        let position_embedding = add(cfg.max_seq_len, d, Init::Normal(0.5));
        let norm = |add: &mut dyn FnMut(usize, usize, Init) -> usize| Norm {
            gamma: add(1, d, Init::Ones),
            beta: add(1, d, Init::Zeros),
        };
        let attention = |add: &mut dyn FnMut(usize, usize, Init) -> usize| Attention {
            wq: add(d, d, w_std(d)),
            bq: add(1, d, Init::Zeros),
            wk: add(d, d, w_std(d)),
            bk: add(1, d, Init::Zeros),
            wv: add(d, d, w_std(d)),
            bv: add(1, d, Init::Zeros),
            wo: add(d, d, w_std(d)),
            bo: add(1, d, Init::Zeros),
        };
        let ff = |add: &mut dyn FnMut(usize, usize, Init) -> usize| FeedForward {
            w1: add(d, cfg.ff_dim, w_std(d)),
            b1: add(1, cfg.ff_dim, Init::Zeros),
            w2: add(cfg.ff_dim, d, w_std(cfg.ff_dim)),
            b2: add(1, d, Init::Zeros),
        };
        let encoder = (0..cfg.encoder_layers)
            .map(|_| EncoderLayer {
                norm_attn: norm(&mut add),
                attn: attention(&mut add),
                norm_ff: norm(&mut add),
                ff: ff(&mut add),
            })
            .collect();
        let encoder_norm = norm(&mut add);
        let decoder = (0..cfg.decoder_layers)
            .map(|_| DecoderLayer {
                norm_self: norm(&mut add),
                self_attn: attention(&mut add),
                norm_cross: norm(&mut add),
                cross_attn: attention(&mut add),
                norm_ff: norm(&mut add),
                ff: ff(&mut add),
            })
            .collect();
        let decoder_norm = norm(&mut add);
        let out_w = add(d, vocab_size, w_std(d));
        let out_b = add(1, vocab_size, Init::Zeros);
        Self {
            token_embedding,
            position_embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            out_w,
            out_b,
            shapes,
        }
    }
}

/// Pre-norm encoder-decoder transformer with learned positions and a shared
/// source/target embedding table.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    vocab: Vocab,
    layout: Layout,
    params: Vec<Matrix>,
}

impl PartialEq for Transformer {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.vocab == other.vocab && self.params == other.params
    }
}

impl Transformer {
    /// Freshly initialized model; initialization is a pure function of `config.seed`.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        let mut rng = PortableRng::stream(config.seed, 0);
        let params = layout
            .shapes
            .iter()
            .map(|&(r, c, init)| match init {
                Init::Zeros => Matrix::zeros(r, c),
                Init::Ones => Matrix::filled(r, c, 1.0),
                Init::Normal(std) => {
                    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.normal() as f32 * std).collect())
                }
            })
            .collect();
        Ok(Self {
            config,
            vocab,
            layout,
            params,
        })
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocab, params: Vec<Matrix>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        if layout.shapes.len() != params.len() {
            return Err(ModelError::Format(format!(
                "expected {} parameter matrices, found {}",
                layout.shapes.len(),
                params.len()
            )));
        }
        for (i, (&(r, c, _), p)) in layout.shapes.iter().zip(&params).enumerate() {
            if (p.rows, p.cols) != (r, c) || p.data.len() != r * c {
                return Err(ModelError::Format(format!(
                    "parameter {i}: expected {r}x{c}, found {}x{}",
                    p.rows, p.cols
                )));
            }
        }
        Ok(Self {
            config,
            vocab,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    fn embed(&self, tape: &mut Tape, ids: &[u32]) -> Var {
        let tok = tape.param(self.layout.token_embedding);
        let pos = tape.param(self.layout.position_embedding);
        let te = tape.gather(tok, ids);
        let positions: Vec<u32> = (0..ids.len() as u32).collect();
        let pe = tape.gather(pos, &positions);
        tape.add(te, pe)
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: Norm) -> Var {
        let g = tape.param(n.gamma);
        let b = tape.param(n.beta);
        tape.layer_norm(x, g, b)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: usize, b: usize) -> Var {
        let w = tape.param(w);
        let b = tape.param(b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    fn attention(&self, tape: &mut Tape, query: Var, memory: Var, a: Attention, causal: bool) -> Var {
        let q = self.linear(tape, query, a.wq, a.bq);
        let k = self.linear(tape, memory, a.wk, a.bk);
        let v = self.linear(tape, memory, a.wv, a.bv);
        let heads = self.config.num_heads;
        let hd = self.config.embed_dim / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * hd, hd);
            let kh = tape.slice_cols(k, h * hd, hd);
            let vh = tape.slice_cols(v, h * hd, hd);
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let p = tape.softmax(scores, causal);
            outs.push(tape.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.linear(tape, cat, a.wo, a.bo)
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, f: FeedForward) -> Var {
        let h = self.linear(tape, x, f.w1, f.b1);
        let h = tape.relu(h);
        self.linear(tape, h, f.w2, f.b2)
    }

    fn encode(&self, tape: &mut Tape, source: &[u32]) -> Var {
        let mut x = self.embed(tape, source);
        for layer in &self.layout.encoder {
            let n = self.norm(tape, x, layer.norm_attn);
            let a = self.attention(tape, n, n, layer.attn, false);
            x = tape.add(x, a);
            let n = self.norm(tape, x, layer.norm_ff);
            let f = self.feed_forward(tape, n, layer.ff);
            x = tape.add(x, f);
        }
        self.norm(tape, x, self.layout.encoder_norm)
    }

    /// Logits for every decoder position (`prefix.len() × |V|`).
    pub(crate) fn forward(&self, tape: &mut Tape, source: &[u32], prefix: &[u32]) -> Var {
        let memory = self.encode(tape, source);
        let mut y = self.embed(tape, prefix);
        for layer in &self.layout.decoder {
            let n = self.norm(tape, y, layer.norm_self);
            let a = self.attention(tape, n, n, layer.self_attn, true);
            y = tape.add(y, a);
            let n = self.norm(tape, y, layer.norm_cross);
            let c = self.attention(tape, n, memory, layer.cross_attn, false);
            y = tape.add(y, c);
            let n = self.norm(tape, y, layer.norm_ff);
            let f = self.feed_forward(tape, n, layer.ff);
            y = tape.add(y, f);
        }
        let y = self.norm(tape, y, self.layout.decoder_norm);
        self.linear(tape, y, self.layout.out_w, self.layout.out_b)
    }

    /// Next-token log-probabilities after every prefix position in one pass.
    pub fn all_step_logprobs(&self, source: &TokenSeq, prefix: &TokenSeq) -> Result<Vec<Vec<f32>>, ModelError> {
        check_query(&self.vocab, self.config.max_seq_len, source, prefix)?;
        let mut tape = Tape::new(&self.params);
        let logits = self.forward(&mut tape, source, prefix);
        let lv = tape.value(logits);
        Ok((0..lv.rows).map(|r| log_softmax_row(lv.row(r))).collect())
    }
}

impl TranslationModel for Transformer {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn next_token_logprobs(&self, source: &TokenSeq, prefix: &TokenSeq) -> Result<Vec<f32>, ModelError> {
        check_query(&self.vocab, self.config.max_seq_len, source, prefix)?;
        let mut tape = Tape::new(&self.params);
        let logits = self.forward(&mut tape, source, prefix);
        let lv = tape.value(logits);
        Ok(log_softmax_row(lv.row(lv.rows - 1)))
    }
}
