use super::{DistributedFno, FnoError, FnoParams, Result};
use crate::comm::Communicator;
use crate::tensor::{Real, Tensor};

/// Adam over the flattened parameter vector (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(num_components: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![T::zero(); num_components], v: vec![T::zero(); num_components] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Mean squared error over every element of the global output, identical on
/// all ranks, plus the gradient of the loss with respect to the local output.
pub fn mse_loss<T: Real>(
    comm: &mut Communicator,
    output: &Tensor<T>,
    target: &Tensor<T>,
    global_count: usize,
) -> Result<(f64, Tensor<T>)> {
    let local: f64 = output.data().iter().zip(target.data()).map(|(&o, &t)| (o - t).as_f64().powi(2)).sum();
    let loss = comm.allreduce_sum(local)? / global_count as f64;
    let scale = T::of(2.0 / global_count as f64);
    let grad = output.zip_map(target, |o, t| (o - t) * scale)?;
    Ok((loss, grad))
}

/// Model plus optimizer state for one rank.
pub struct TrainState<T: Real> {
    pub model: DistributedFno<T>,
    pub optimizer: Adam<T>,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: DistributedFno<T>) -> Self {
        let n = model.params().num_components();
        TrainState { model, optimizer: Adam::new(n) }
    }

    /// One collective optimization step on this rank's batch block. `global_count`
    /// is the number of output elements of the whole (all-rank) batch.
    pub fn step(
        &mut self,
        comm: &mut Communicator,
        x: &Tensor<T>,
        y: &Tensor<T>,
        global_count: usize,
        lr: f64,
    ) -> Result<f64> {
        let (out, cache) = self.model.forward(comm, x)?;
        let (loss, grad_out) = mse_loss(comm, &out, y, global_count)?;
        if !loss.is_finite() {
            return Err(FnoError::NonFiniteLoss(loss));
        }
        let (_, mut grads) = self.model.backward(comm, &cache, &grad_out)?;
        // rank 0 holds the reduced encoder/decoder gradients; share them so
        // every rank applies the same update to its replica
        grads.encoder = comm.broadcast(0, &grads.encoder)?;
        grads.decoder = comm.broadcast(0, &grads.decoder)?;
        let params = self.model.params();
        let mut flat = params.flatten();
        self.optimizer.update(&mut flat, &grads.flatten(), lr);
        let updated = params.unflatten(&flat);
        self.model.set_params(updated);
        self.check_replicated(comm)?;
        Ok(loss)
    }

    /// Compares every rank's encoder/decoder against rank 0's bit for bit.
    pub fn check_replicated(&self, comm: &mut Communicator) -> Result<()> {
        let p: &FnoParams<T> = self.model.params();
        for (name, local) in [("encoder", &p.encoder), ("decoder", &p.decoder)] {
            let root = comm.broadcast(0, local)?;
            let same = root.data().iter().zip(local.data()).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits() || (a.is_nan() && b.is_nan()));
            let mismatched = comm.allreduce_sum(if same { 0.0 } else { 1.0 })?;
            if mismatched > 0.0 {
                return Err(FnoError::Replication(format!("{name} differs on {mismatched} rank(s)")));
            }
        }
        Ok(())
    }
}
