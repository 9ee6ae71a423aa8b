//! Domain-specific batch normalization.

use crate::error::{ensure, Error, Result};
use crate::params::{Ctx, DomainId, NormUpdate, ParamId, ParamRole, ParamStore};
use crate::tensor::{NormStats, Tensor, Var};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Running statistics of one domain branch.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization with an independent affine pair and running
/// statistics for every domain. Affine parameters live in the
/// [`ParamStore`]; running statistics live here.
#[derive(Debug, Clone)]
pub struct DsbnLayer {
    pub key: usize,
    pub channels: usize,
    pub gamma: Vec<ParamId>,
    pub beta: Vec<ParamId>,
    pub running: Vec<RunningStats>,
    pub momentum: f64,
    pub eps: f64,
}

impl DsbnLayer {
    /// `key` identifies the layer in [`NormUpdate`]s; it must be unique per network.
    pub fn new(store: &mut ParamStore, prefix: &str, key: usize, channels: usize, n_domains: usize) -> Self {
        let mut gamma = Vec::with_capacity(n_domains);
        let mut beta = Vec::with_capacity(n_domains);
        for d in 0..n_domains {
            gamma.push(store.add(format!("{prefix}.gamma{d}"), ParamRole::Norm, Tensor::ones(vec![channels])));
            beta.push(store.add(format!("{prefix}.beta{d}"), ParamRole::Norm, Tensor::zeros(vec![channels])));
        }
        Self {
            key,
            channels,
            gamma,
            beta,
            running: vec![
                RunningStats {
                    mean: vec![0.0; channels],
                    var: vec![1.0; channels],
                };
                n_domains
            ],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn n_domains(&self) -> usize {
        self.running.len()
    }

    /// Normalizes `x`, whose batch items carry the domains in `domains`.
    /// In training mode the batch statistics are queued on `ctx` for
    /// [`DsbnLayer::apply`]; in eval mode the domain's running statistics are used.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, domains: &[DomainId]) -> Result<Var> {
        let domain = homogeneous_domain(domains)?;
        if domain.0 >= self.n_domains() {
            return Err(Error::UnknownDomain(domain.0));
        }
        let shape = ctx.tape.shape(x).to_vec();
        ensure!(shape.len() == 4 && shape[1] == self.channels, "dsbn: expected [B,{},H,W], got {:?}", self.channels, shape);
        ensure!(shape[0] == domains.len(), "dsbn: {} domain ids for a batch of {}", domains.len(), shape[0]);
        let (g, b) = (ctx.p(self.gamma[domain.0]), ctx.p(self.beta[domain.0]));
        if ctx.is_train() {
            let (y, stats) = ctx.tape.batch_norm(x, g, b, &NormStats::Batch { eps: self.eps })?;
            let (mean, var) = stats.expect("batch mode returns statistics");
            ctx.norm_updates.push(NormUpdate {
                layer: self.key,
                domain,
                mean,
                var,
                count: shape[0] * shape[2] * shape[3],
            });
            Ok(y)
        } else {
            let rs = &self.running[domain.0];
            let stats = NormStats::Fixed {
                mean: rs.mean.clone(),
                var: rs.var.clone(),
                eps: self.eps,
            };
            Ok(ctx.tape.batch_norm(x, g, b, &stats)?.0)
        }
    }

    /// Folds a queued batch statistic into the domain's running averages.
    /// The running variance uses the unbiased batch variance.
    pub fn apply(&mut self, update: &NormUpdate) -> Result<()> {
        ensure!(update.layer == self.key, "dsbn: update for layer {} applied to layer {}", update.layer, self.key);
        let d = update.domain.0;
        if d >= self.n_domains() {
            return Err(Error::UnknownDomain(d));
        }
        ensure!(update.mean.len() == self.channels && update.var.len() == self.channels, "dsbn: statistics width mismatch");
        let m = self.momentum;
        let bessel = if update.count > 1 { update.count as f64 / (update.count - 1) as f64 } else { 1.0 };
        let rs = &mut self.running[d];
        for c in 0..self.channels {
            rs.mean[c] = (1.0 - m) * rs.mean[c] + m * update.mean[c];
            rs.var[c] = (1.0 - m) * rs.var[c] + m * update.var[c] * bessel;
        }
        Ok(())
    }

    /// Training-mode forward that applies its own statistics update at once.
    pub fn forward_train(&mut self, ctx: &mut Ctx, x: Var, domains: &[DomainId]) -> Result<Var> {
        ensure!(ctx.is_train(), "forward_train requires a training context");
        let y = self.forward(ctx, x, domains)?;
        let update = ctx.norm_updates.pop().expect("training forward queues an update");
        self.apply(&update)?;
        Ok(y)
    }
}

fn homogeneous_domain(domains: &[DomainId]) -> Result<DomainId> {
    let first = *domains.first().ok_or_else(|| Error::Contract("dsbn: empty batch".into()))?;
    ensure!(domains.iter().all(|&d| d == first), "dsbn: mixed-domain batch {:?}", domains);
    Ok(first)
}
