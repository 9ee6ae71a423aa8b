//! Receptive-field experts: a small depthwise-separable block and a
//! dilated multiplicative context block.

use crate::error::{ensure, Result};
use crate::params::{he_normal, lecun_normal, Ctx, ParamId, ParamRole, ParamStore};
use crate::rng::Xoshiro256;
use crate::tensor::{Tensor, Var};

/// Depthwise 3×3 followed by a pointwise projection and GELU.
#[derive(Debug, Clone)]
pub struct LocalDetailExpert {
    pub channels: usize,
    pub dw: ParamId,
    pub pw: ParamId,
    pub pw_bias: ParamId,
    pub activation: bool,
}

impl LocalDetailExpert {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut Xoshiro256) -> Self {
        Self {
            channels,
            dw: store.add(format!("{prefix}.dw"), ParamRole::Weight, he_normal(vec![channels, 1, 3, 3], 9, rng)),
            pw: store.add(format!("{prefix}.pw"), ParamRole::Weight, lecun_normal(vec![channels, channels, 1, 1], channels, rng)),
            pw_bias: store.add(format!("{prefix}.pw_bias"), ParamRole::Weight, Tensor::zeros(vec![channels])),
            activation: true,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        check_channels("local expert", ctx.tape.shape(x), self.channels)?;
        let (dw, pw, b) = (ctx.p(self.dw), ctx.p(self.pw), ctx.p(self.pw_bias));
        let h = ctx.tape.depthwise_conv(x, dw, 1)?;
        let h = ctx.tape.pointwise_conv(h, pw, Some(b))?;
        Ok(if self.activation { ctx.tape.gelu(h) } else { h })
    }
}

/// `GELU(F_pw(F_dilated(F_dw(x)))) ⊙ x` with 5×5 kernels, the second
/// dilated by 3, for a 17×17 support.
#[derive(Debug, Clone)]
pub struct GlobalContextExpert {
    pub channels: usize,
    pub dw: ParamId,
    pub dilated: ParamId,
    pub pw: ParamId,
    pub pw_bias: ParamId,
    pub activation: bool,
}

pub const GLOBAL_DILATION: usize = 3;

impl GlobalContextExpert {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut Xoshiro256) -> Self {
        Self {
            channels,
            dw: store.add(format!("{prefix}.dw"), ParamRole::Weight, lecun_normal(vec![channels, 1, 5, 5], 25, rng)),
            dilated: store.add(format!("{prefix}.dilated"), ParamRole::Weight, lecun_normal(vec![channels, 1, 5, 5], 25, rng)),
            pw: store.add(format!("{prefix}.pw"), ParamRole::Weight, lecun_normal(vec![channels, channels, 1, 1], channels, rng)),
            pw_bias: store.add(format!("{prefix}.pw_bias"), ParamRole::Weight, Tensor::zeros(vec![channels])),
            activation: true,
        }
    }

    /// The branch before the multiplicative assembly.
    pub fn branch(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        check_channels("global expert", ctx.tape.shape(x), self.channels)?;
        let (dw, dil, pw, b) = (ctx.p(self.dw), ctx.p(self.dilated), ctx.p(self.pw), ctx.p(self.pw_bias));
        let h = ctx.tape.depthwise_conv(x, dw, 1)?;
        let h = ctx.tape.depthwise_conv(h, dil, GLOBAL_DILATION)?;
        let h = ctx.tape.pointwise_conv(h, pw, Some(b))?;
        Ok(if self.activation { ctx.tape.gelu(h) } else { h })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let branch = self.branch(ctx, x)?;
        ctx.tape.mul(branch, x)
    }
}

fn check_channels(what: &str, shape: &[usize], channels: usize) -> Result<()> {
    ensure!(shape.len() == 4 && shape[1] == channels, "{}: expected [B,{},H,W], got {:?}", what, channels, shape);
    Ok(())
}
