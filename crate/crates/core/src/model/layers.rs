use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ModulePrefixes, ParamStore, Result};
use crate::tensor::{ConvPadding, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Forward-pass context: the tape, the parameters and optional dropout.
pub(crate) struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub prefixes: &'a ModulePrefixes,
    pub dropout: Option<(f64, &'a mut ChaCha8Rng)>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, prefixes: &'a ModulePrefixes) -> Self {
        Ctx {
            tape,
            store,
            prefixes,
            dropout: None,
        }
    }

    /// Bind a parameter given its bare name.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        self.store.bind(self.tape, &self.prefixes.resolve(name))
    }

    /// `x · W + b` over the last axis.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        Ok(self.tape.layer_norm(x, g, b, LN_EPS)?)
    }

    pub fn conv(
        &mut self,
        prefix: &str,
        x: Var,
        stride: usize,
        padding: ConvPadding,
    ) -> Result<Var> {
        let k = self.p(&format!("{prefix}.kernel"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.tape.conv1d(x, k, stride, padding)?;
        Ok(self.tape.add(y, b)?)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if *rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - *rate;
        let shape = self.tape.shape(x)?.to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = self.tape.constant(&Tensor::new(&shape, mask)?);
        Ok(self.tape.mul(x, m)?)
    }

    /// Multi-head scaled dot-product self-attention with an allow-mask.
    pub fn self_attention(
        &mut self,
        prefix: &str,
        x: Var,
        heads: usize,
        allow: &Tensor,
    ) -> Result<Var> {
        let d = self.tape.shape(x)?[1];
        let dh = d / heads;
        let q = self.linear(&format!("{prefix}.q"), x)?;
        let k = self.linear(&format!("{prefix}.k"), x)?;
        let v = self.linear(&format!("{prefix}.v"), x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice(q, 1, h * dh, dh)?;
            let kh = self.tape.slice(k, 1, h * dh, dh)?;
            let vh = self.tape.slice(v, 1, h * dh, dh)?;
            let kt = self.tape.transpose(kh)?;
            let s = self.tape.matmul(qh, kt)?;
            let s = self.tape.scale(s, scale)?;
            let a = self.tape.softmax(s, 1, Some(allow))?;
            outs.push(self.tape.matmul(a, vh)?);
        }
        let cat = if heads == 1 {
            outs[0]
        } else {
            self.tape.concat(&outs, 1)?
        };
        self.linear(&format!("{prefix}.o"), cat)
    }

    /// Pre-norm transformer block.
    pub fn encoder_block(
        &mut self,
        prefix: &str,
        x: Var,
        heads: usize,
        allow: &Tensor,
    ) -> Result<Var> {
        let h = self.layer_norm(&format!("{prefix}.ln1"), x)?;
        let h = self.self_attention(&format!("{prefix}.attn"), h, heads, allow)?;
        let h = self.dropout(h)?;
        let x = self.tape.add(x, h)?;
        let h = self.layer_norm(&format!("{prefix}.ln2"), x)?;
        let h = self.linear(&format!("{prefix}.ff1"), h)?;
        let h = self.tape.gelu(h)?;
        let h = self.linear(&format!("{prefix}.ff2"), h)?;
        let h = self.dropout(h)?;
        Ok(self.tape.add(x, h)?)
    }

    /// `x + W_up · relu(W_down · LN(x))`, biases included.
    pub fn adapter(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.layer_norm(&format!("{prefix}.ln"), x)?;
        let h = self.linear(&format!("{prefix}.down"), h)?;
        let h = self.tape.relu(h)?;
        let h = self.linear(&format!("{prefix}.up"), h)?;
        Ok(self.tape.add(x, h)?)
    }
}

/// Residual adapter stored under `prefix` (`{prefix}.ln`, `.down`, `.up`).
pub fn adapter_forward(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    Ctx::new(tape, store, &ModulePrefixes::default()).adapter(prefix, x)
}
