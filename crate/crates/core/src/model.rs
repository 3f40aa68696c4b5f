//! End-to-end model assembly: backbone + tuning method + SV head.
//!
//! A [`ModelConfig`] owns the three sub-configurations and knows how to build
//! the full parameter registry, run forward passes (logits for training,
//! embeddings for scoring), and compute batch losses with gradients.

use crate::backbone::{self, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamRegistry, ParamSpec};
use crate::pet::{self, ForwardOpts, MethodSpec, PetContext};
use crate::sv::{self, BackendConfig};
use crate::tensor::tape::Var;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub method: MethodSpec,
    pub backend: BackendConfig,
    pub num_speakers: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.method.validate(&self.backbone)?;
        self.backend.validate()?;
        if self.num_speakers < 2 {
            return Err(Error::Config(format!(
                "need at least 2 training speakers, got {}",
                self.num_speakers
            )));
        }
        Ok(())
    }

    /// Width of the frames the backend consumes.
    pub fn backend_input_dim(&self) -> usize {
        if self.method.method.uses_inter() {
            self.method.inter_dim
        } else {
            self.backbone.hidden
        }
    }

    /// Every parameter of the assembled model, with trainability per method.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let mut specs = self
            .backbone
            .param_specs(false, self.method.method.trains_blocks());
        specs.extend(pet::pet_param_specs(&self.method, &self.backbone)?);
        specs.extend(sv::backend_param_specs(
            &self.backend,
            self.backend_input_dim(),
            self.num_speakers,
        ));
        Ok(specs)
    }

    pub fn init_registry<F: Scalar>(&self, seed: u64) -> Result<ParamRegistry<F>> {
        ParamRegistry::from_specs(&self.param_specs()?, seed)
    }

    fn context(&self, opts: ForwardOpts) -> PetContext {
        PetContext::new(self.method.clone(), opts)
    }

    /// Backend input frames for one waveform.
    fn frames<F: Scalar>(&self, b: &mut Binder<F>, waveform: Var, opts: ForwardOpts) -> Result<Var> {
        let ctx = self.context(opts);
        let stack = backbone::encode(b, &self.backbone, waveform, &ctx)?;
        sv::aggregate(b, &stack, &self.method, &ctx)
    }

    pub fn embedding<F: Scalar>(
        &self,
        b: &mut Binder<F>,
        waveform: Var,
        opts: ForwardOpts,
    ) -> Result<Var> {
        let frames = self.frames(b, waveform, opts)?;
        sv::embed(b, &self.backend, frames)
    }

    pub fn logits<F: Scalar>(
        &self,
        b: &mut Binder<F>,
        waveform: Var,
        opts: ForwardOpts,
    ) -> Result<Var> {
        let e = self.embedding(b, waveform, opts)?;
        sv::classify(b, &self.backend, e)
    }

    /// Mean cross-entropy over a batch; waveforms enter the tape as
    /// constants, parameters are shared across the batch through the binder.
    pub fn batch_loss<F: Scalar>(
        &self,
        b: &mut Binder<F>,
        waves: &[Tensor<F>],
        labels: &[usize],
        opts: ForwardOpts,
    ) -> Result<Var> {
        if waves.is_empty() || waves.len() != labels.len() {
            return Err(Error::Input(format!(
                "batch of {} waveforms with {} labels",
                waves.len(),
                labels.len()
            )));
        }
        let mut total = None;
        for (wave, &label) in waves.iter().zip(labels) {
            let wv = b.tape.constant(wave.clone());
            let logits = self.logits(b, wv, opts)?;
            let loss = b.tape.cross_entropy(logits, label)?;
            total = Some(match total {
                None => loss,
                Some(t) => b.tape.add(t, loss)?,
            });
        }
        Ok(b.tape.scale(total.expect("nonempty batch"), F::fl(1.0 / waves.len() as f64)))
    }

    /// Loss value plus per-parameter gradients for one batch (train mode).
    pub fn loss_and_grads<F: Scalar>(
        &self,
        reg: &ParamRegistry<F>,
        waves: &[Tensor<F>],
        labels: &[usize],
        opts: ForwardOpts,
    ) -> Result<(f64, BTreeMap<String, Tensor<F>>)> {
        let mut b = Binder::new(reg, true);
        let loss = self.batch_loss(&mut b, waves, labels, opts)?;
        let loss_val = b.tape.value(loss).item()?.to_f64().unwrap();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss_val}")));
        }
        let grads = b.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, var) in b.bound() {
            if let Some(g) = grads.get(var) {
                out.insert(name.to_string(), g.clone());
            }
        }
        Ok((loss_val, out))
    }

    /// Forward-only loss (no tracking); used by finite-difference checks.
    pub fn loss_value<F: Scalar>(
        &self,
        reg: &ParamRegistry<F>,
        waves: &[Tensor<F>],
        labels: &[usize],
        opts: ForwardOpts,
    ) -> Result<f64> {
        let mut b = Binder::new(reg, false);
        let loss = self.batch_loss(&mut b, waves, labels, opts)?;
        Ok(b.tape.value(loss).item()?.to_f64().unwrap())
    }

    /// Embedding as a plain vector for one waveform (eval mode).
    pub fn embed_utterance<F: Scalar>(
        &self,
        reg: &ParamRegistry<F>,
        wave: &Tensor<F>,
    ) -> Result<Vec<f64>> {
        let mut b = Binder::new(reg, false);
        let wv = b.tape.constant(wave.clone());
        let e = self.embedding(&mut b, wv, ForwardOpts::default())?;
        Ok(b.tape.value(e).data().iter().map(|v| v.to_f64().unwrap()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pet::Method;

    fn micro_model(method: Method) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::micro(),
            method: MethodSpec::micro(method),
            backend: BackendConfig::micro(),
            num_speakers: 3,
        }
    }

    fn wave(seed: usize, len: usize) -> Tensor<f64> {
        Tensor::vector((0..len).map(|i| ((i + seed * 31) as f64 * 0.37).sin() * 0.5).collect())
    }

    #[test]
    fn logits_shape_and_determinism() {
        let m = micro_model(Method::Unipet);
        let reg = m.init_registry::<f64>(42).unwrap();
        let run = || {
            let mut b = Binder::new(&reg, false);
            let wv = b.tape.constant(wave(1, 30));
            let l = m.logits(&mut b, wv, ForwardOpts::default()).unwrap();
            b.tape.value(l).data().to_vec()
        };
        let a = run();
        assert_eq!(a.len(), 3);
        assert_eq!(a, run());
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_init_methods_match_disabled_forward() {
        // At initialization every tuning delta is zero, so logits must match
        // the same forward pass with deltas switched off (identical layout).
        for method in [
            Method::Inner,
            Method::Houlsby,
            Method::Lora,
            Method::Prompt,
            Method::Unipet,
            Method::UnipetNogate,
            Method::InnerInter,
        ] {
            let m = micro_model(method);
            let reg = m.init_registry::<f64>(7).unwrap();
            let opts_zero_gates = ForwardOpts {
                disable_pet: false,
                prompt_gate_override: Some(0.0),
                adapter_gate_override: None,
            };
            let eval = |opts: ForwardOpts| {
                let mut b = Binder::new(&reg, false);
                let wv = b.tape.constant(wave(2, 30));
                let l = m.logits(&mut b, wv, opts).unwrap();
                b.tape.value(l).data().to_vec()
            };
            let live = eval(opts_zero_gates);
            let baseline = eval(ForwardOpts {
                disable_pet: true,
                prompt_gate_override: None,
                adapter_gate_override: None,
            });
            for (a, b) in live.iter().zip(&baseline) {
                assert!((a - b).abs() < 1e-6, "method {}: {live:?} vs {baseline:?}", method.name());
            }
        }
    }

    #[test]
    fn prompt_content_invariance_under_zero_gate() {
        let m = micro_model(Method::Prompt);
        let mut reg = m.init_registry::<f64>(3).unwrap();
        let opts = ForwardOpts {
            disable_pet: false,
            prompt_gate_override: Some(0.0),
            adapter_gate_override: None,
        };
        let eval = |reg: &ParamRegistry<f64>| {
            let mut b = Binder::new(reg, false);
            let wv = b.tape.constant(wave(5, 30));
            let l = m.logits(&mut b, wv, opts).unwrap();
            b.tape.value(l).data().to_vec()
        };
        let before = eval(&reg);
        for i in 0..m.backbone.num_layers {
            let p = reg.get_mut(&format!("pet.prompt{i}")).unwrap();
            let shape = p.tensor.shape().to_vec();
            p.tensor = Tensor::filled(shape, 123.0);
        }
        let after = eval(&reg);
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn batch_loss_gradients_cover_exactly_the_trainables() {
        let m = micro_model(Method::Unipet);
        let reg = m.init_registry::<f64>(1).unwrap();
        let waves = [wave(0, 26), wave(1, 30)];
        let (loss, grads) = m
            .loss_and_grads(&reg, &waves, &[0, 2], ForwardOpts::default())
            .unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        for (name, _) in grads.iter().map(|(n, g)| (n.as_str(), g)) {
            assert!(reg.get(name).unwrap().trainable, "gradient for frozen `{name}`");
        }
        // every trainable that participates in the forward must get a gradient
        for (name, p) in reg.trainable() {
            assert!(grads.contains_key(name), "no gradient for `{name}` ({:?})", p.tensor.shape());
        }
    }

    #[test]
    fn backend_only_never_binds_pet_parameters() {
        let m = micro_model(Method::BackendOnly);
        let reg = m.init_registry::<f64>(1).unwrap();
        let (_, grads) = m
            .loss_and_grads(&reg, &[wave(3, 30)], &[1], ForwardOpts::default())
            .unwrap();
        assert!(grads.keys().all(|k| k.starts_with("head.")));
    }
}
