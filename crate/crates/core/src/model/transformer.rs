use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::block::{BlockCtx, BlockVars, Norm, NormVars, TransformerBlock, Watch};
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, GradTape, Real, Rng, Tensor, Var};

/// Decoder-only transformer with learned absolute positions and an output
/// head tied to the token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T: Real = f32> {
    pub config: ModelConfig,
    /// `[vocab, hidden]`; also the output head.
    pub tok_emb: Tensor<T>,
    /// `[max_seq_len, hidden]`.
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub final_norm: Norm<T>,
    /// Fake-quantize Linear inputs to this many bits (W4A8-style runs).
    pub act_bits: Option<u8>,
}

/// Per-block inputs and outputs for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace<T: Real = f32> {
    /// `states[0]` is the embedding output, `states[l + 1]` block `l`'s output.
    states: Vec<Tensor<T>>,
}

impl<T: Real> BlockTrace<T> {
    pub fn from_states(states: Vec<Tensor<T>>) -> Self {
        Self { states }
    }

    pub fn len(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, l: usize) -> &Tensor<T> {
        &self.states[l]
    }

    pub fn output(&self, l: usize) -> &Tensor<T> {
        &self.states[l + 1]
    }

    pub fn outputs(&self) -> &[Tensor<T>] {
        &self.states[1..]
    }
}

/// Tape handles for every model tensor, in [`TransformerModel::named_tensors`]
/// order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: NormVars,
}

impl ModelVars {
    pub fn in_order(&self) -> Vec<Var> {
        let mut v = alloc::vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            v.push(b.norm1.gamma);
            v.extend(b.norm1.beta);
            v.push(b.norm2.gamma);
            v.extend(b.norm2.beta);
            v.extend(b.linears);
        }
        v.push(self.final_norm.gamma);
        v.extend(self.final_norm.beta);
        v
    }
}

impl<T: Real> TransformerModel<T> {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let tok_emb = Tensor::randn(&[config.vocab_size, h], 0.02, rng);
        let pos_emb = Tensor::randn(&[config.max_seq_len, h], 0.01, rng);
        let blocks = (0..config.n_layers)
            .map(|_| TransformerBlock::init(&config, rng))
            .collect();
        let final_norm = Norm::identity(config.norm_kind, h);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            act_bits: None,
        })
    }

    pub fn block_ctx(&self) -> BlockCtx {
        BlockCtx {
            heads: self.config.n_heads,
            eps: self.config.eps,
            act_bits: self.act_bits,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn cast<U: Real>(&self) -> TransformerModel<U> {
        let norm = |n: &Norm<T>| Norm {
            kind: n.kind,
            gamma: n.gamma.cast(),
            beta: n.beta.as_ref().map(|b| b.cast()),
        };
        let lin = |l: &super::Linear<T>| super::Linear {
            weight: l.weight.cast(),
            quant: l.quant.clone(),
        };
        TransformerModel {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| TransformerBlock {
                    norm1: norm(&b.norm1),
                    wq: lin(&b.wq),
                    wk: lin(&b.wk),
                    wv: lin(&b.wv),
                    wo: lin(&b.wo),
                    norm2: norm(&b.norm2),
                    w_up: lin(&b.w_up),
                    w_down: lin(&b.w_down),
                })
                .collect(),
            final_norm: norm(&self.final_norm),
            act_bits: self.act_bits,
        }
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.push(("tok_emb".into(), &self.tok_emb));
        out.push(("pos_emb".into(), &self.pos_emb));
        for (l, b) in self.blocks.iter().enumerate() {
            push_norm(&mut out, &format!("blocks.{l}.norm1"), &b.norm1);
            push_norm(&mut out, &format!("blocks.{l}.norm2"), &b.norm2);
            for (name, lin) in LINEAR_NAMES.iter().zip(b.linears()) {
                out.push((format!("blocks.{l}.{name}"), &lin.weight));
            }
        }
        push_norm(&mut out, "final_norm", &self.final_norm);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("tok_emb".into(), &mut self.tok_emb));
        out.push(("pos_emb".into(), &mut self.pos_emb));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let TransformerBlock {
                norm1,
                norm2,
                wq,
                wk,
                wv,
                wo,
                w_up,
                w_down,
            } = b;
            push_norm_mut(&mut out, &format!("blocks.{l}.norm1"), norm1);
            push_norm_mut(&mut out, &format!("blocks.{l}.norm2"), norm2);
            for (name, lin) in LINEAR_NAMES.iter().zip([wq, wk, wv, wo, w_up, w_down]) {
                out.push((format!("blocks.{l}.{name}"), &mut lin.weight));
            }
        }
        push_norm_mut(&mut out, "final_norm", &mut self.final_norm);
        out
    }

    /// Token plus position embeddings for a `[batch, seq]` id grid.
    pub fn embed(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>> {
        self.check_tokens(tokens, batch, seq)?;
        let h = self.config.hidden;
        let mut data = Vec::with_capacity(batch * seq * h);
        for b in 0..batch {
            for t in 0..seq {
                let tok = self.tok_emb.row(tokens[b * seq + t] as usize);
                let pos = self.pos_emb.row(t);
                data.extend(tok.iter().zip(pos).map(|(&a, &p)| a + p));
            }
        }
        Tensor::new(&[batch, seq, h], data)
    }

    fn check_tokens(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<()> {
        if tokens.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(Error::shape("tokens", &[batch, seq], &[tokens.len()]));
        }
        if seq > self.config.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs every block on an embedding batch, keeping each block's output.
    pub fn run_blocks(&self, x0: Tensor<T>) -> Result<BlockTrace<T>> {
        if x0.rank() == 3 && x0.shape()[1] > self.config.max_seq_len {
            return Err(Error::contract("sequence longer than max_seq_len"));
        }
        let ctx = self.block_ctx();
        let mut states = Vec::with_capacity(self.blocks.len() + 1);
        states.push(x0);
        for (l, b) in self.blocks.iter().enumerate() {
            let y = b.forward(&states[l], &ctx).map_err(|e| e.at_layer(l))?;
            states.push(y);
        }
        Ok(BlockTrace { states })
    }

    /// Final norm and tied head on a `[..., hidden]` tensor.
    pub fn head(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.final_norm.forward(x, T::from_f64(self.config.eps))?;
        matmul_nt(&n, &self.tok_emb)
    }

    /// Logits `[batch, seq, vocab]` and the per-block trace.
    pub fn forward_with_trace(
        &self,
        tokens: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<(Tensor<T>, BlockTrace<T>)> {
        let x0 = self.embed(tokens, batch, seq)?;
        let trace = self.run_blocks(x0)?;
        let logits = self.head(trace.states.last().expect("non-empty"))?;
        Ok((logits, trace))
    }

    pub fn forward(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Tensor<T>> {
        Ok(self.forward_with_trace(tokens, batch, seq)?.0)
    }

    /// Puts all model tensors on `tape`.
    pub fn record(&self, tape: &mut GradTape<T>, watch: Watch) -> ModelVars {
        let leaf = |tape: &mut GradTape<T>, t: &Tensor<T>| match watch {
            Watch::All => tape.param(t.clone()),
            Watch::Norms => tape.constant(t.clone()),
        };
        let tok_emb = leaf(tape, &self.tok_emb);
        let pos_emb = leaf(tape, &self.pos_emb);
        let blocks = self.blocks.iter().map(|b| b.record(tape, watch)).collect();
        let final_norm = NormVars {
            gamma: tape.param(self.final_norm.gamma.clone()),
            beta: self.final_norm.beta.as_ref().map(|b| tape.param(b.clone())),
        };
        ModelVars {
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
        }
    }

    /// Taped full forward; returns logits `[batch, seq, vocab]`.
    pub fn forward_recorded(
        &self,
        tape: &mut GradTape<T>,
        vars: &ModelVars,
        tokens: &[u32],
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        self.check_tokens(tokens, batch, seq)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..seq).collect();
        let tok = tape.gather(vars.tok_emb, &ids)?;
        let tok = tape.reshape(tok, &[batch, seq, self.config.hidden])?;
        let pos = tape.gather(vars.pos_emb, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let ctx = self.block_ctx();
        for (b, bv) in self.blocks.iter().zip(&vars.blocks) {
            x = b.forward_recorded(tape, bv, x, &ctx)?;
        }
        let n = self
            .final_norm
            .apply_recorded(tape, &vars.final_norm, x, T::from_f64(self.config.eps))?;
        tape.matmul_nt(n, vars.tok_emb)
    }
}

pub(crate) const LINEAR_NAMES: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"];

/// True for normalization gamma/beta tensor names.
pub fn is_norm_tensor(name: &str) -> bool {
    name.contains("norm")
}

fn push_norm<'a, T: Real>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, n: &'a Norm<T>) {
    out.push((format!("{prefix}.gamma"), &n.gamma));
    if let Some(b) = &n.beta {
        out.push((format!("{prefix}.beta"), b));
    }
}

fn push_norm_mut<'a, T: Real>(
    out: &mut Vec<(String, &'a mut Tensor<T>)>,
    prefix: &str,
    n: &'a mut Norm<T>,
) {
    out.push((format!("{prefix}.gamma"), &mut n.gamma));
    if let Some(b) = &mut n.beta {
        out.push((format!("{prefix}.beta"), b));
    }
}
