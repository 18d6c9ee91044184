//! Pre-LN transformer encoder-decoder.
//!
//! The taped forward pass (teacher forcing) is used for every loss; the
//! cached incremental decoder is used for generation and reproduces the taped
//! pass step by step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{self, Matrix};
use super::vocab::BOS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            max_len: 256,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 4 {
            return Err(Error::Config("max_len must be at least 4".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn_norm: Norm,
    attn: Attention,
    ffn_norm: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: Attention,
    cross_norm: Norm,
    cross_attn: Attention,
    ffn_norm: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    out: Linear,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Matrix>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let data = match init {
            Init::Zeros => vec![0.0; rows * cols],
            Init::Ones => vec![1.0; rows * cols],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..rows * cols).map(|_| dist.sample(self.rng)).collect()
            }
        };
        self.names.push(name);
        self.tensors.push(Matrix::from_vec(rows, cols, data));
        self.tensors.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: self.tensor(format!("{name}.weight"), fan_in, fan_out, Init::Normal(std)),
            b: self.tensor(format!("{name}.bias"), 1, fan_out, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.tensor(format!("{name}.gamma"), 1, d, Init::Ones),
            beta: self.tensor(format!("{name}.beta"), 1, d, Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d),
        }
    }
}

fn build_layout(config: &ModelConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> (Layout, Vec<String>, Vec<Matrix>) {
    let d = config.d_model;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng,
    };
    let emb_std = 1.0 / (d as f64).sqrt();
    let tok_emb = b.tensor("embed.tokens".into(), vocab_size, d, Init::Normal(emb_std));
    let pos_emb = b.tensor("embed.positions".into(), config.max_len, d, Init::Normal(emb_std));
    let encoder = (0..config.n_layers)
        .map(|l| EncoderLayer {
            attn_norm: b.norm(&format!("encoder.{l}.attn_norm"), d),
            attn: b.attention(&format!("encoder.{l}.attn"), d),
            ffn_norm: b.norm(&format!("encoder.{l}.ffn_norm"), d),
            ffn: b.ffn(&format!("encoder.{l}.ffn"), d, config.ffn_dim),
        })
        .collect();
    let encoder_norm = b.norm("encoder.norm", d);
    let decoder = (0..config.n_layers)
        .map(|l| DecoderLayer {
            self_norm: b.norm(&format!("decoder.{l}.self_norm"), d),
            self_attn: b.attention(&format!("decoder.{l}.self_attn"), d),
            cross_norm: b.norm(&format!("decoder.{l}.cross_norm"), d),
            cross_attn: b.attention(&format!("decoder.{l}.cross_attn"), d),
            ffn_norm: b.norm(&format!("decoder.{l}.ffn_norm"), d),
            ffn: b.ffn(&format!("decoder.{l}.ffn"), d, config.ffn_dim),
        })
        .collect();
    let decoder_norm = b.norm("decoder.norm", d);
    let out = b.linear("lm_head", d, vocab_size);
    let layout = Layout {
        tok_emb,
        pos_emb,
        encoder,
        encoder_norm,
        decoder,
        decoder_norm,
        out,
    };
    (layout, b.names, b.tensors)
}

/// Optional dropout source for a training forward pass.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

/// Output of a teacher-forced decoder pass.
#[derive(Debug, Clone, Copy)]
pub struct DecoderPass {
    /// Last-layer representations, one row per target position.
    pub reps: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    config: ModelConfig,
    vocab_size: usize,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Matrix>,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size <= super::vocab::UNK {
            return Err(Error::Config(format!("vocabulary of size {vocab_size} has no content tokens")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (layout, names, params) = build_layout(&config, vocab_size, &mut rng);
        Ok(Self {
            config,
            vocab_size,
            layout,
            names,
            params,
        })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_tensors(config: ModelConfig, vocab_size: usize, tensors: Vec<(String, Matrix)>) -> Result<Self> {
        let mut model = Self::new(config, vocab_size)?;
        if tensors.len() != model.params.len() {
            return Err(Error::arg(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (i, (name, m)) in tensors.into_iter().enumerate() {
            if name != model.names[i] || m.shape() != model.params[i].shape() {
                return Err(Error::arg(format!(
                    "tensor {i}: expected {} {:?}, found {name} {:?}",
                    model.names[i],
                    model.params[i].shape(),
                    m.shape()
                )));
            }
            model.params[i] = m;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|m| m.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.params.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect()
    }

    /// Zeroes the output projection so every next-token distribution is uniform.
    pub fn make_uniform(&mut self) {
        let out = self.layout.out;
        self.params[out.w].data.iter_mut().for_each(|v| *v = 0.0);
        self.params[out.b].data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Zeroes every cross-attention output projection, making the decoder blind
    /// to the source sequence.
    pub fn make_source_blind(&mut self) {
        for layer in self.layout.decoder.clone() {
            let o = layer.cross_attn.o;
            self.params[o.w].data.iter_mut().for_each(|v| *v = 0.0);
            self.params[o.b].data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn check_ids(&self, ids: &[usize], what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::arg(format!("{what} sequence is empty")));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::arg(format!(
                "{what} length {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::arg(format!("{what} token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    fn lin(&self, g: &mut Graph, x: Var, l: Linear) -> Var {
        let w = g.param(l.w);
        let b = g.param(l.b);
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Var {
        let gamma = g.param(n.gamma);
        let beta = g.param(n.beta);
        g.layer_norm(x, gamma, beta)
    }

    fn drop(&self, g: &mut Graph, x: Var, dropout: &mut Option<Dropout>) -> Var {
        match dropout {
            Some(d) if d.rate > 0.0 => {
                let n = g.value(x).data.len();
                let keep = 1.0 - d.rate;
                let mask = (0..n)
                    .map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                g.dropout(x, mask)
            }
            _ => x,
        }
    }

    fn attention(&self, g: &mut Graph, xq: Var, xkv: Var, a: Attention, causal: bool) -> Var {
        let q = self.lin(g, xq, a.q);
        let k = self.lin(g, xkv, a.k);
        let v = self.lin(g, xkv, a.v);
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.config.n_heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let scores = g.matmul_bt(qh, kh);
                let scores = g.scale(scores, scale);
                let p = g.softmax_rows(scores, causal);
                g.matmul(p, vh)
            })
            .collect();
        let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.lin(g, ctx, a.o)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, f: FeedForward) -> Var {
        let h = self.lin(g, x, f.up);
        let h = g.gelu(h);
        self.lin(g, h, f.down)
    }

    fn embed(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let tok = g.param(self.layout.tok_emb);
        let pos = g.param(self.layout.pos_emb);
        let t = g.gather_rows(tok, ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.gather_rows(pos, &positions);
        g.add(t, p)
    }

    /// Encodes a source sequence; returns the final-normed memory (S×d).
    pub fn encode(&self, g: &mut Graph, source: &[usize], mut dropout: Option<Dropout>) -> Result<Var> {
        self.check_ids(source, "source")?;
        let x = self.embed(g, source);
        let mut x = self.drop(g, x, &mut dropout);
        for layer in &self.layout.encoder {
            let h = self.norm(g, x, layer.attn_norm);
            let h = self.attention(g, h, h, layer.attn, false);
            let h = self.drop(g, h, &mut dropout);
            x = g.add(x, h);
            let h = self.norm(g, x, layer.ffn_norm);
            let h = self.feed_forward(g, h, layer.ffn);
            let h = self.drop(g, h, &mut dropout);
            x = g.add(x, h);
        }
        Ok(self.norm(g, x, self.layout.encoder_norm))
    }

    /// Teacher-forced decoder pass: input is `BOS` followed by `target[..T-1]`,
    /// and row `t` of the output predicts `target[t]`.
    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph,
        memory: Var,
        target: &[usize],
        mut dropout: Option<Dropout>,
    ) -> Result<DecoderPass> {
        self.check_ids(target, "target")?;
        let inputs: Vec<usize> = std::iter::once(BOS).chain(target[..target.len() - 1].iter().copied()).collect();
        let y = self.embed(g, &inputs);
        let mut y = self.drop(g, y, &mut dropout);
        for layer in &self.layout.decoder {
            let h = self.norm(g, y, layer.self_norm);
            let h = self.attention(g, h, h, layer.self_attn, true);
            let h = self.drop(g, h, &mut dropout);
            y = g.add(y, h);
            let h = self.norm(g, y, layer.cross_norm);
            let h = self.attention(g, h, memory, layer.cross_attn, false);
            let h = self.drop(g, h, &mut dropout);
            y = g.add(y, h);
            let h = self.norm(g, y, layer.ffn_norm);
            let h = self.feed_forward(g, h, layer.ffn);
            let h = self.drop(g, h, &mut dropout);
            y = g.add(y, h);
        }
        let reps = self.norm(g, y, self.layout.decoder_norm);
        let logits = self.lin(g, reps, self.layout.out);
        Ok(DecoderPass { reps, logits })
    }

    /// Encoder memory as a plain matrix, for generation.
    pub fn encode_memory(&self, source: &[usize]) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let m = self.encode(&mut g, source, None)?;
        Ok(g.value(m).clone())
    }

    /// Starts an incremental decoder over a precomputed encoder memory.
    pub fn start_decoder(&self, memory: Matrix) -> IncrementalDecoder<'_> {
        let cross = self
            .layout
            .decoder
            .iter()
            .map(|layer| {
                let a = layer.cross_attn;
                let k = tensor::linear(&memory, &self.params[a.k.w], &self.params[a.k.b]);
                let v = tensor::linear(&memory, &self.params[a.v.w], &self.params[a.v.b]);
                (k, v)
            })
            .collect();
        let d = self.config.d_model;
        IncrementalDecoder {
            model: self,
            cross,
            self_k: vec![Matrix::zeros(0, d); self.layout.decoder.len()],
            self_v: vec![Matrix::zeros(0, d); self.layout.decoder.len()],
            position: 0,
        }
    }
}

/// Cached single-token decoder; step `t` reproduces row `t` of the
/// teacher-forced pass.
pub struct IncrementalDecoder<'m> {
    model: &'m Seq2Seq,
    cross: Vec<(Matrix, Matrix)>,
    self_k: Vec<Matrix>,
    self_v: Vec<Matrix>,
    position: usize,
}

/// One incremental step: next-token logits and the last-layer representation.
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub rep: Vec<f64>,
}

impl IncrementalDecoder<'_> {
    pub fn position(&self) -> usize {
        self.position
    }

    fn p(&self, id: usize) -> &Matrix {
        &self.model.params[id]
    }

    fn lin(&self, x: &Matrix, l: Linear) -> Matrix {
        tensor::linear(x, self.p(l.w), self.p(l.b))
    }

    fn norm(&self, x: &Matrix, n: Norm) -> Matrix {
        tensor::layer_norm(x, self.p(n.gamma), self.p(n.beta)).0
    }

    fn attend(&self, q: &Matrix, k: &Matrix, v: &Matrix, o: Linear) -> Matrix {
        let cfg = &self.model.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Matrix::zeros(1, cfg.d_model);
        for h in 0..cfg.n_heads {
            let qh = q.slice_cols(h * dh, dh);
            let kh = k.slice_cols(h * dh, dh);
            let vh = v.slice_cols(h * dh, dh);
            let mut scores = tensor::matmul_bt(&qh, &kh);
            scores.scale_assign(scale);
            let p = tensor::softmax_rows(&scores, None);
            let c = tensor::matmul(&p, &vh);
            ctx.row_mut(0)[h * dh..(h + 1) * dh].copy_from_slice(c.row(0));
        }
        self.lin(&ctx, o)
    }

    /// Feeds `token` at the current position.
    pub fn step(&mut self, token: usize) -> Result<StepOutput> {
        let model = self.model;
        if self.position >= model.config.max_len {
            return Err(Error::arg("decoder position exceeds max_len"));
        }
        if token >= model.vocab_size {
            return Err(Error::arg(format!("token id {token} outside vocabulary")));
        }
        let d = model.config.d_model;
        let mut y = Matrix::zeros(1, d);
        let tok = self.p(model.layout.tok_emb).row(token);
        let pos = self.p(model.layout.pos_emb).row(self.position);
        for (i, v) in y.data.iter_mut().enumerate() {
            *v = tok[i] + pos[i];
        }
        for (l, layer) in model.layout.decoder.iter().enumerate() {
            let h = self.norm(&y, layer.self_norm);
            let q = self.lin(&h, layer.self_attn.q);
            let k = self.lin(&h, layer.self_attn.k);
            let v = self.lin(&h, layer.self_attn.v);
            self.self_k[l].data.extend_from_slice(&k.data);
            self.self_k[l].rows += 1;
            self.self_v[l].data.extend_from_slice(&v.data);
            self.self_v[l].rows += 1;
            let a = self.attend(&q, &self.self_k[l], &self.self_v[l], layer.self_attn.o);
            y.add_assign(&a);

            let h = self.norm(&y, layer.cross_norm);
            let q = self.lin(&h, layer.cross_attn.q);
            let (ck, cv) = &self.cross[l];
            let a = self.attend(&q, ck, cv, layer.cross_attn.o);
            y.add_assign(&a);

            let h = self.norm(&y, layer.ffn_norm);
            let mut up = self.lin(&h, layer.ffn.up);
            up.data.iter_mut().for_each(|v| *v = tensor::gelu(*v));
            let down = self.lin(&up, layer.ffn.down);
            y.add_assign(&down);
        }
        let rep = self.norm(&y, model.layout.decoder_norm);
        let logits = self.lin(&rep, model.layout.out);
        self.position += 1;
        Ok(StepOutput {
            logits: logits.data,
            rep: rep.data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 24,
            max_len: 20,
            dropout: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.n_heads = 3;
        assert!(Seq2Seq::new(c, 20).is_err());
        assert!(Seq2Seq::new(small(), 3).is_err());
    }

    #[test]
    fn incremental_matches_teacher_forced() {
        let model = Seq2Seq::new(small(), 20).unwrap();
        let source = vec![1, 7, 8, 3, 9, 2];
        let target = vec![10, 11, 4, 12, 2];
        let mut g = Graph::new(model.params());
        let mem = model.encode(&mut g, &source, None).unwrap();
        let pass = model.decode_teacher_forced(&mut g, mem, &target, None).unwrap();
        let logits = g.value(pass.logits).clone();
        let reps = g.value(pass.reps).clone();

        let mut dec = model.start_decoder(model.encode_memory(&source).unwrap());
        let inputs: Vec<usize> = std::iter::once(BOS).chain(target[..4].iter().copied()).collect();
        for (t, &tok) in inputs.iter().enumerate() {
            let out = dec.step(tok).unwrap();
            for c in 0..20 {
                assert!((out.logits[c] - logits.get(t, c)).abs() < 1e-10);
            }
            for c in 0..16 {
                assert!((out.rep[c] - reps.get(t, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = Seq2Seq::new(small(), 20).unwrap();
        let b = Seq2Seq::new(small(), 20).unwrap();
        assert_eq!(a.params(), b.params());
        let run = |m: &Seq2Seq| {
            let mut g = Graph::new(m.params());
            let mem = m.encode(&mut g, &[1, 6, 7, 2], None).unwrap();
            let p = m.decode_teacher_forced(&mut g, mem, &[8, 9, 2], None).unwrap();
            g.value(p.logits).clone()
        };
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn overlong_sequences_rejected() {
        let model = Seq2Seq::new(small(), 20).unwrap();
        let mut g = Graph::new(model.params());
        assert!(model.encode(&mut g, &[6; 21], None).is_err());
        assert!(model.encode(&mut g, &[], None).is_err());
    }
}
