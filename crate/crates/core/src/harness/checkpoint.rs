//! Whole-run checkpoints: every network of the latent model and the agent,
//! plus the entropy temperature, in one tensor set. Loading demands the exact
//! same tensor names, so a checkpoint can only be read back into the
//! architecture that wrote it.

use std::path::Path;

use crate::diffnet::{load_checkpoint, save_checkpoint, ParamTensor};
use crate::latentmodel::LatentModel;
use crate::learner::Learner;
use crate::Result;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DIAGNOSTIC_DIR: &str = "diagnostic-checkpoint";

const TEMPERATURE_TENSOR: &str = "temperature.log_alpha";

fn temperature_tensor(log_alpha: f64) -> ParamTensor<f32> {
    let mut t = ParamTensor::zeros(TEMPERATURE_TENSOR, &[1]);
    t.values[0] = log_alpha as f32;
    t
}

/// Writes model, agent, and temperature tensors to `dir`.
pub fn save_run_checkpoint(
    dir: &Path,
    model: &LatentModel<f32>,
    learner: &Learner<f32>,
) -> Result<()> {
    let temp = temperature_tensor(learner.log_alpha());
    let mut tensors: Vec<(String, &ParamTensor<f32>)> = Vec::new();
    tensors.extend(model.encoder.named_params("model.encoder"));
    tensors.extend(model.decoder.named_params("model.decoder"));
    tensors.extend(model.dynamics.named_params("model.dynamics"));
    tensors.extend(learner.nets.encoder.named_params("agent.encoder"));
    tensors.extend(learner.nets.actor.named_params("agent.actor"));
    tensors.extend(learner.nets.q1.named_params("agent.q1"));
    tensors.extend(learner.nets.q2.named_params("agent.q2"));
    tensors.extend(learner.nets.target_q1.named_params("agent.target_q1"));
    tensors.extend(learner.nets.target_q2.named_params("agent.target_q2"));
    tensors.push((TEMPERATURE_TENSOR.to_string(), &temp));
    save_checkpoint(dir, &tensors)
}

/// Restores model, agent, and temperature from `dir`. Optimizer moments are
/// not part of a checkpoint; resumed training re-warms them.
pub fn load_run_checkpoint(
    dir: &Path,
    model: &mut LatentModel<f32>,
    learner: &mut Learner<f32>,
) -> Result<()> {
    let mut temp = temperature_tensor(0.0);
    {
        let mut tensors: Vec<(String, &mut ParamTensor<f32>)> = Vec::new();
        tensors.extend(model.encoder.named_params_mut("model.encoder"));
        tensors.extend(model.decoder.named_params_mut("model.decoder"));
        tensors.extend(model.dynamics.named_params_mut("model.dynamics"));
        tensors.extend(learner.nets.encoder.named_params_mut("agent.encoder"));
        tensors.extend(learner.nets.actor.named_params_mut("agent.actor"));
        tensors.extend(learner.nets.q1.named_params_mut("agent.q1"));
        tensors.extend(learner.nets.q2.named_params_mut("agent.q2"));
        tensors.extend(learner.nets.target_q1.named_params_mut("agent.target_q1"));
        tensors.extend(learner.nets.target_q2.named_params_mut("agent.target_q2"));
        tensors.push((TEMPERATURE_TENSOR.to_string(), &mut temp));
        load_checkpoint(dir, &mut tensors)?;
    }
    learner.set_log_alpha(f64::from(temp.values[0]));
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::fs;

    use super::*;
    use crate::harness::RunConfig;
    use crate::latentmodel::ModelTrainer;
    use crate::rng;

    fn tiny_setup(seed: u64) -> (LatentModel<f32>, Learner<f32>) {
        let mut cfg = RunConfig::default();
        cfg.env.image_side = 16;
        cfg.model.enc_channels = 4;
        cfg.model.enc_fc = 16;
        cfg.model.dec_hidden = 16;
        cfg.model.dyn_hidden = 8;
        cfg.model.latent_dim = 3;
        cfg.learner.enc_channels = 4;
        cfg.learner.feature_dim = 8;
        cfg.learner.hidden_dim = 8;
        let mut r = rng::stream(seed, "ckpt-test");
        let model = LatentModel::new(cfg.model_arch(), &mut r).unwrap();
        let learner = Learner::new(cfg.learner_config().unwrap(), &mut r).unwrap();
        (model, learner)
    }

    #[test]
    fn round_trip_restores_every_tensor_and_the_temperature() {
        let dir = tempfile::tempdir().unwrap();
        let (model, mut learner) = tiny_setup(7);
        learner.set_log_alpha(-1.25);
        save_run_checkpoint(dir.path(), &model, &learner).unwrap();

        let (mut model2, mut learner2) = tiny_setup(8);
        load_run_checkpoint(dir.path(), &mut model2, &mut learner2).unwrap();

        let pairs = [
            (model.encoder.params(), model2.encoder.params()),
            (model.decoder.params(), model2.decoder.params()),
            (model.dynamics.params(), model2.dynamics.params()),
            (learner.nets.actor.params(), learner2.nets.actor.params()),
            (learner.nets.target_q2.params(), learner2.nets.target_q2.params()),
        ];
        for (a, b) in pairs {
            for (ta, tb) in a.iter().zip(b.iter()) {
                let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&ta.values), bits(&tb.values), "{}", ta.name);
            }
        }
        assert_eq!(learner2.log_alpha(), f64::from(-1.25f32));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let (model, learner) = tiny_setup(9);
        save_run_checkpoint(dir1.path(), &model, &learner).unwrap();

        let (mut model2, mut learner2) = tiny_setup(10);
        load_run_checkpoint(dir1.path(), &mut model2, &mut learner2).unwrap();
        save_run_checkpoint(dir2.path(), &model2, &learner2).unwrap();

        for f in ["manifest.json", "params.bin"] {
            let x = fs::read(dir1.path().join(f)).unwrap();
            let y = fs::read(dir2.path().join(f)).unwrap();
            assert_eq!(x, y, "{f} differs after a load/save round trip");
        }
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (model, learner) = tiny_setup(11);
        save_run_checkpoint(dir.path(), &model, &learner).unwrap();

        let mut cfg = RunConfig::default();
        cfg.env.image_side = 16;
        cfg.model.enc_channels = 4;
        cfg.model.enc_fc = 16;
        cfg.model.dec_hidden = 16;
        cfg.model.dyn_hidden = 8;
        cfg.model.latent_dim = 4;
        cfg.learner.enc_channels = 4;
        cfg.learner.feature_dim = 8;
        cfg.learner.hidden_dim = 8;
        let mut r = rng::stream(12, "ckpt-test");
        let mut model2 = LatentModel::new(cfg.model_arch(), &mut r).unwrap();
        let mut learner2 = Learner::new(cfg.learner_config().unwrap(), &mut r).unwrap();
        assert!(load_run_checkpoint(dir.path(), &mut model2, &mut learner2).is_err());
    }

    #[test]
    fn trained_model_survives_the_trainer_wrapper() {
        let (model, learner) = tiny_setup(13);
        let trainer = ModelTrainer::new(model, 1e-3, 1.0, 2);
        let dir = tempfile::tempdir().unwrap();
        save_run_checkpoint(dir.path(), &trainer.model, &learner).unwrap();
        let (mut model2, mut learner2) = tiny_setup(14);
        load_run_checkpoint(dir.path(), &mut model2, &mut learner2).unwrap();
    }
}
