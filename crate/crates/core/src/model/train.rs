use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainHyper;
use super::net::{Dropout, Example, Transformer};
use crate::digest::{item_seed, mix64};
use super::tensor::Tensor;
use super::ModelError;

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(shapes: &[Tensor], hyper: &TrainHyper) -> Self {
        let zeros = || shapes.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Self { m: zeros(), v: zeros(), t: 0, beta1: hyper.beta1, beta2: hyper.beta2, eps: hyper.adam_eps }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup then inverse square root, from the hyper-parameters.
    InverseSqrt,
    Constant { lr: f64 },
}

/// Rewrites the decoder input of an example; gets the example and a per-example seed.
pub type DecoderNoise<'a> = &'a (dyn Fn(&Example, u64) -> Vec<usize> + Sync);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean label-smoothed loss per target token, one entry per update.
    pub losses: Vec<f64>,
    pub updates: usize,
}

/// Packs shuffled example indices into batches holding at most `budget` tokens (a
/// single oversized example still forms its own batch).
pub fn token_batches<R: Rng>(examples: &[Example], budget: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for i in order {
        let n = examples[i].src.len().max(examples[i].target_tokens());
        if !cur.is_empty() && tokens + n > budget {
            batches.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += n;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

pub struct Trainer {
    pub model: Transformer,
    pub hyper: TrainHyper,
    adam: Adam,
    step: usize,
    dropout_seed: u64,
    pub parallel: bool,
}

impl Trainer {
    pub fn new(model: Transformer, hyper: TrainHyper) -> Self {
        let adam = Adam::new(&model.params.tensors, &hyper);
        Self { model, hyper, adam, step: 0, dropout_seed: 0, parallel: false }
    }

    pub fn updates_done(&self) -> usize {
        self.step
    }

    /// Loss and gradient summed over `batch`. The per-example gradients are added in
    /// batch order, so the parallel and serial paths agree bit for bit.
    fn batch_grad(&self, batch: &[Example], batch_seed: u64) -> Result<(f64, Vec<Tensor>), ModelError> {
        let eps = self.hyper.label_smoothing;
        let one = |(i, ex): (usize, &Example)| -> Result<(f64, Vec<Tensor>), ModelError> {
            let mut g = self.model.params.zeros_like();
            let dropout = (self.hyper.dropout > 0.0).then(|| Dropout::new(self.hyper.dropout, item_seed(batch_seed, i as u64)));
            let loss = self.model.accumulate_grad_with(ex, eps, 1.0, &mut g, dropout)?;
            Ok((loss, g))
        };
        let parts: Vec<(f64, Vec<Tensor>)> = if self.parallel {
            batch.par_iter().enumerate().map(one).collect::<Result<_, _>>()?
        } else {
            batch.iter().enumerate().map(one).collect::<Result<_, _>>()?
        };
        let mut total = self.model.params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (t, gi) in total.iter_mut().zip(&g) {
                t.add_assign(gi);
            }
        }
        Ok((loss, total))
    }

    /// One optimizer update over several batches, normalized by their target tokens.
    pub fn update(&mut self, batches: &[Vec<Example>], schedule: LrSchedule) -> Result<f64, ModelError> {
        let mut grads = self.model.params.zeros_like();
        let mut loss = 0.0;
        let mut tokens = 0usize;
        let step_seed = item_seed(self.dropout_seed, self.step as u64);
        for (bi, b) in batches.iter().enumerate() {
            let (l, g) = self.batch_grad(b, item_seed(step_seed, bi as u64))?;
            loss += l;
            tokens += b.iter().map(Example::target_tokens).sum::<usize>();
            for (t, gi) in grads.iter_mut().zip(&g) {
                t.add_assign(gi);
            }
        }
        let norm = 1.0 / tokens.max(1) as f64;
        for g in &mut grads {
            g.scale(norm);
        }
        let loss = loss * norm;
        if !loss.is_finite() || !grads.iter().all(Tensor::is_finite) {
            return Err(ModelError::NonFiniteLoss { step: self.step + 1 });
        }
        self.step += 1;
        let lr = match schedule {
            LrSchedule::InverseSqrt => self.hyper.learning_rate(self.step),
            LrSchedule::Constant { lr } => lr,
        };
        self.adam.update(&mut self.model.params.tensors, &grads, lr);
        if !self.model.params.is_finite() {
            return Err(ModelError::NonFiniteLoss { step: self.step });
        }
        Ok(loss)
    }

    /// Runs `updates` optimizer updates over shuffled token batches drawn from `data`.
    pub fn train(
        &mut self,
        data: &[Example],
        updates: usize,
        schedule: LrSchedule,
        seed: u64,
        noise: Option<DecoderNoise<'_>>,
    ) -> Result<TrainLog, ModelError> {
        if data.is_empty() {
            return Err(ModelError::Config("empty training corpus".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.dropout_seed = mix64(seed);
        let mut queue: Vec<Vec<usize>> = Vec::new();
        let mut losses = Vec::with_capacity(updates);
        let freq = self.hyper.update_freq.max(1);
        for _ in 0..updates {
            let mut group = Vec::with_capacity(freq);
            for _ in 0..freq {
                if queue.is_empty() {
                    queue = token_batches(data, self.hyper.batch_tokens, &mut rng);
                    queue.reverse();
                }
                let idx = queue.pop().expect("non-empty corpus yields batches");
                let batch: Vec<Example> = idx
                    .iter()
                    .map(|&i| {
                        let mut ex = data[i].clone();
                        if let Some(f) = noise {
                            ex.dec_in = f(&ex, rng.gen());
                        }
                        ex
                    })
                    .collect();
                group.push(batch);
            }
            losses.push(self.update(&group, schedule)?);
        }
        Ok(TrainLog { losses, updates })
    }

    pub fn into_model(mut self) -> Transformer {
        self.model.params.round_to_f32();
        self.model
    }
}

/// Mean per-token loss over a corpus without label smoothing.
pub fn corpus_loss(model: &Transformer, data: &[Example]) -> Result<f64, ModelError> {
    let mut loss = 0.0;
    let mut tokens = 0;
    for ex in data {
        loss += model.example_loss(ex, 0.0)?;
        tokens += ex.target_tokens();
    }
    Ok(loss / tokens.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(tensor name, offset, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares backpropagated gradients with central differences on `n` randomly chosen
/// parameters. Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(model: &Transformer, ex: &Example, n: usize, eps: f64, seed: u64) -> Result<GradCheck, ModelError> {
    let ls = 0.1;
    let mut grads = model.params.zeros_like();
    model.accumulate_grad(ex, ls, 1.0, &mut grads)?;
    let total = model.params.scalar_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut out = GradCheck { checked: 0, max_rel_err: 0.0, worst: None };
    for _ in 0..n.min(total) {
        let (ti, off) = model.params.locate(rng.gen_range(0..total));
        let orig = model.params.tensors[ti].data[off];
        probe.params.tensors[ti].data[off] = orig + eps;
        let up = probe.example_loss(ex, ls)?;
        probe.params.tensors[ti].data[off] = orig - eps;
        let down = probe.example_loss(ex, ls)?;
        probe.params.tensors[ti].data[off] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads[ti].data[off];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        out.checked += 1;
        if rel > out.max_rel_err || out.worst.is_none() {
            out.max_rel_err = out.max_rel_err.max(rel);
            out.worst = Some((model.params.names[ti].clone(), off, analytic, numeric));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{Arch, ModelConfig};

    fn copy_task() -> Vec<Example> {
        (0..24).map(|i| {
            let s: Vec<usize> = (0..3).map(|j| 2 + (i * 7 + j * 3) % 6).collect();
            Example::new(s.clone(), s)
        }).collect()
    }

    fn tiny() -> Transformer {
        let mut cfg = ModelConfig::desk(Arch::Big, 1, 1, 8, 8);
        cfg.hidden = 16;
        cfg.ffn = 32;
        cfg.heads = 2;
        Transformer::new(cfg, 1).unwrap()
    }

    #[test]
    fn loss_goes_down_on_copy_task() {
        let data = copy_task();
        let model = tiny();
        let before = corpus_loss(&model, &data).unwrap();
        let mut hyper = TrainHyper::desk();
        hyper.batch_tokens = 40;
        hyper.warmup_steps = 10;
        hyper.lr_peak = 0.01;
        let mut tr = Trainer::new(model, hyper);
        tr.train(&data, 60, LrSchedule::InverseSqrt, 5, None).unwrap();
        let after = corpus_loss(&tr.into_model(), &data).unwrap();
        assert!(after < before * 0.5, "{before} -> {after}");
    }

    #[test]
    fn parallel_matches_serial() {
        let data = copy_task();
        let mut hyper = TrainHyper::desk();
        hyper.batch_tokens = 40;
        let mut a = Trainer::new(tiny(), hyper.clone());
        let mut b = Trainer::new(tiny(), hyper);
        b.parallel = true;
        a.train(&data, 3, LrSchedule::InverseSqrt, 9, None).unwrap();
        b.train(&data, 3, LrSchedule::InverseSqrt, 9, None).unwrap();
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn batches_cover_corpus_once() {
        let data = copy_task();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = token_batches(&data, 10, &mut rng);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 2));
    }
}
