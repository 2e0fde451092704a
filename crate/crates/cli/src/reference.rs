//! The generated config reference.

use crate::config::ExperimentConfig;

/// Every accepted key with its meaning.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("dataset.seed", "Seed of the synthetic generator."),
    ("dataset.classes", "Number of shape classes, 2 to 8."),
    ("dataset.train_per_class", "Training images per class."),
    ("dataset.test_per_class", "Test images per class."),
    ("dataset.size", "Image height and width in pixels."),
    ("dataset.channels", "1 for grayscale or 3."),
    ("dataset.noise", "Standard deviation of the additive pixel noise."),
    ("dataset.train_file", "Dataset file used instead of the synthetic training split."),
    ("dataset.test_file", "Dataset file used instead of the synthetic test split."),
    ("dataset.augment", "Random flips and crops on training batches."),
    ("dataset.flip_probability", "Probability of a horizontal flip."),
    ("dataset.crop_padding", "Zero padding before the random crop."),
    ("teacher.preset", "Teacher architecture; `desk` is the only preset."),
    ("teacher.generator", "Explicit teacher generator layers; needs `teacher.classifier`."),
    ("teacher.classifier", "Explicit teacher classifier layers; needs `teacher.generator`."),
    ("teacher.dir", "Directory of the teacher run."),
    ("teacher.epochs", "Teacher training epochs."),
    ("teacher.lr_main", "Teacher learning rate."),
    ("teacher.lr_decay_epochs", "Epochs after which the teacher learning rate is multiplied by `optimizer.lr_decay_factor`."),
    ("teacher.regressor_dir", "Directory of the regressor run."),
    ("teacher.regressor_steps", "Regressor training steps."),
    ("teacher.regressor_lr", "Regressor learning rate."),
    ("teacher.regressor_stride", "Regressor stride `[h, w]`; the kernel is solved from it."),
    ("teacher.regressor_padding", "Regressor padding `[h, w]`."),
    ("student.preset", "Student architecture; `desk` is the only preset."),
    ("student.generator", "Explicit student generator layers; needs `student.classifier`."),
    ("student.classifier", "Explicit student classifier layers; needs `student.generator`."),
    ("method.name", "One of teacher, student, kd, dln, ktan, ktan_kd."),
    ("method.seed", "Seed of initialization, shuffling and augmentation; `--seed` overrides it."),
    ("method.epochs", "Total epochs, pretraining and adversarial together."),
    ("method.beta", "Weight of the feature-map mean squared error."),
    ("method.temperature", "Softening temperature of the distillation term."),
    ("method.kd_weight", "Weight of the distillation term against cross-entropy."),
    ("method.kd_scale_t2", "Multiply the distillation term by the squared temperature."),
    ("method.fitnet_weight", "Feature-map weight when `method.fitnet_weighting` is set."),
    ("method.fitnet_weighting", "Use `method.fitnet_weight` instead of `method.beta` for the feature-map term."),
    ("optimizer.batch_size", "Training mini-batch size."),
    ("optimizer.lr_main", "Student learning rate before the adversarial phase."),
    ("optimizer.momentum", "SGD momentum."),
    ("optimizer.weight_decay", "L2 weight decay."),
    ("optimizer.lr_decay_epochs", "Epochs after which the student learning rate is multiplied by `optimizer.lr_decay_factor`."),
    ("optimizer.lr_decay_factor", "Step decay factor."),
    ("optimizer.eval_batch_size", "Batch size for accuracy evaluation."),
    ("adversarial.alpha", "Weight of the adversarial generator loss."),
    ("adversarial.lr", "Learning rate of the student during the adversarial phase."),
    ("adversarial.lr_discriminator", "Discriminator learning rate; defaults to `adversarial.lr`."),
    ("adversarial.pretrain_epochs", "Supervised epochs before the adversarial phase."),
    ("adversarial.pretrain_steps", "Supervised steps before the adversarial phase; overrides `adversarial.pretrain_epochs`."),
    ("adversarial.iterations", "Adversarial iterations; defaults to the rest of `method.epochs`."),
    ("adversarial.discriminator_channels", "Channels of the discriminator convolution."),
    ("adversarial.discriminator_steps", "Discriminator updates per adversarial iteration."),
    ("output.dir", "Directory of the run; `--out` overrides it."),
];

/// Markdown table of every key, its default and its meaning.
pub fn render() -> String {
    let defaults = toml::Value::try_from(ExperimentConfig::default()).expect("config serializes");
    let mut out = String::from("# Experiment config reference\n\nEvery key is optional. Unknown keys are rejected.\n");
    let mut section = "";
    for (key, doc) in KEY_DOCS {
        let (sec, name) = key.split_once('.').unwrap();
        if sec != section {
            section = sec;
            out.push_str(&format!("\n## [{sec}]\n\n| key | default | meaning |\n|---|---|---|\n"));
        }
        let default = defaults
            .get(sec)
            .and_then(|t| t.get(name))
            .map(|v| format!("`{v}`"))
            .unwrap_or_else(|| "unset".into());
        out.push_str(&format!("| `{name}` | {default} | {doc} |\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn documented_keys_are_exactly_the_accepted_keys() {
        let documented: BTreeSet<String> = KEY_DOCS.iter().map(|(k, _)| k.to_string()).collect();
        let accepted: BTreeSet<String> = ExperimentConfig::key_paths().into_iter().collect();
        assert_eq!(documented.len(), KEY_DOCS.len());
        assert_eq!(documented, accepted);
    }

    #[test]
    fn every_documented_key_parses_alone() {
        let full = toml::Value::try_from(ExperimentConfig::populated()).unwrap();
        for (key, _) in KEY_DOCS {
            let (sec, name) = key.split_once('.').unwrap();
            let v = full[sec][name].clone();
            let mut t = toml::map::Map::new();
            let mut inner = toml::map::Map::new();
            inner.insert(name.to_string(), v);
            t.insert(sec.to_string(), toml::Value::Table(inner));
            let text = toml::to_string(&toml::Value::Table(t)).unwrap();
            toml::from_str::<ExperimentConfig>(&text).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn rendered_reference_lists_each_key_once() {
        let text = render();
        for (key, _) in KEY_DOCS {
            let name = key.split_once('.').unwrap().1;
            assert!(text.contains(&format!("| `{name}` |")), "{key}");
        }
    }
}
