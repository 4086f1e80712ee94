//! Line-based `key = value` configuration.
//!
//! `#` starts a comment. `preset = desk|paper` selects the defaults (paper
//! when absent); every other key overrides one field. Unknown and repeated
//! keys are errors.

use std::path::PathBuf;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::CsvtConfig;
use crate::ssl::SslConfig;

/// `(key, value, line number)` triples in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", i + 1)));
        }
        if let Some((_, _, first)) = out.iter().find(|(key, _, _)| key == k) {
            return Err(Error::Config(format!("line {}: {k} already set on line {first}", i + 1)));
        }
        out.push((k.to_string(), v.to_string(), i + 1));
    }
    Ok(out)
}

/// A value that can appear on the right of `=`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(usize, u64, f64, bool);

impl ConfigValue for Option<f64> {
    fn parse_value(s: &str) -> Option<Self> {
        if s == "none" {
            Some(None)
        } else {
            s.parse().ok().map(Some)
        }
    }
    fn show(&self) -> String {
        self.map_or("none".into(), |v| v.to_string())
    }
}

impl ConfigValue for Option<PathBuf> {
    fn parse_value(s: &str) -> Option<Self> {
        Some(if s == "none" { None } else { Some(PathBuf::from(s)) })
    }
    fn show(&self) -> String {
        self.as_ref().map_or("none".into(), |p| p.display().to_string())
    }
}

impl ConfigValue for [f64; 4] {
    fn parse_value(s: &str) -> Option<Self> {
        let v: Vec<f64> = s.split(',').map(|x| x.trim().parse().ok()).collect::<Option<_>>()?;
        v.try_into().ok()
    }
    fn show(&self) -> String {
        self.iter().map(f64::to_string).collect::<Vec<_>>().join(", ")
    }
}

fn parse_as<V: ConfigValue>(key: &str, value: &str, line: usize) -> Result<V> {
    V::parse_value(value).ok_or_else(|| Error::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

/// Generates `set` and `entries` over a fixed key table.
macro_rules! key_table {
    ($ty:ty { $($key:literal => $($field:tt).+),* $(,)? }) => {
        impl $ty {
            fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse_as(key, value, line)?,)*
                    _ => return Err(Error::Config(format!("line {line}: unknown key {key}"))),
                }
                Ok(())
            }

            /// Every key with its current value, in table order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, ConfigValue::show(&self.$($field).+)),)*]
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

/// Everything a command needs besides its file arguments.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: CsvtConfig,
    pub ssl: SslConfig,
    pub ft: FinetuneConfig,
    /// Fold held out by `finetune`.
    pub eval_fold: usize,
    /// Images per inference batch.
    pub eval_batch: usize,
    /// Base directory for relative manifest paths.
    pub data_dir: Option<PathBuf>,
}

key_table!(RunConfig {
    "seed" => seed,
    "data_dir" => data_dir,
    "model.image_size" => model.image_size,
    "model.patch_size" => model.patch_size,
    "model.embed_dim" => model.embed_dim,
    "model.num_layers" => model.num_layers,
    "model.num_heads" => model.num_heads,
    "model.mlp_ratio" => model.mlp_ratio,
    "model.num_classes" => model.num_classes,
    "model.class_token_last" => model.class_token_last,
    "ssl.epochs" => ssl.epochs,
    "ssl.batch_size" => ssl.batch_size,
    "ssl.lr" => ssl.lr,
    "ssl.min_lr" => ssl.min_lr,
    "ssl.warmup_epochs" => ssl.warmup_epochs,
    "ssl.weight_decay_start" => ssl.weight_decay.0,
    "ssl.weight_decay_end" => ssl.weight_decay.1,
    "ssl.teacher_temp" => ssl.teacher_temp,
    "ssl.student_temp" => ssl.student_temp,
    "ssl.center_momentum" => ssl.center_momentum,
    "ssl.centering" => ssl.centering,
    "ssl.proj_hidden" => ssl.proj_hidden,
    "ssl.proj_bottleneck" => ssl.proj_bottleneck,
    "ssl.out_dim" => ssl.out_dim,
    "ssl.clip_grad" => ssl.clip_grad,
    "ssl.stop_below_entropy" => ssl.stop_below_entropy,
    "ssl.global_size" => ssl.multi_crop.global_size,
    "ssl.local_size" => ssl.multi_crop.local_size,
    "ssl.num_local" => ssl.multi_crop.num_local,
    "ssl.global_scale_min" => ssl.multi_crop.global_scale.0,
    "ssl.global_scale_max" => ssl.multi_crop.global_scale.1,
    "ssl.local_scale_min" => ssl.multi_crop.local_scale.0,
    "ssl.local_scale_max" => ssl.multi_crop.local_scale.1,
    "aug.flip_prob" => ssl.multi_crop.augment.flip_prob,
    "aug.jitter_prob" => ssl.multi_crop.augment.jitter_prob,
    "aug.brightness" => ssl.multi_crop.augment.brightness,
    "aug.contrast" => ssl.multi_crop.augment.contrast,
    "aug.saturation" => ssl.multi_crop.augment.saturation,
    "aug.blur_sigma_min" => ssl.multi_crop.augment.blur_sigma.0,
    "aug.blur_sigma_max" => ssl.multi_crop.augment.blur_sigma.1,
    "aug.blur_prob_global1" => ssl.multi_crop.augment.blur_prob_global1,
    "aug.blur_prob_global2" => ssl.multi_crop.augment.blur_prob_global2,
    "aug.blur_prob_local" => ssl.multi_crop.augment.blur_prob_local,
    "aug.solarize_prob" => ssl.multi_crop.augment.solarize_prob,
    "aug.solarize_threshold" => ssl.multi_crop.augment.solarize_threshold,
    "ft.epochs" => ft.epochs,
    "ft.batch_size" => ft.batch_size,
    "ft.lr" => ft.lr,
    "ft.min_lr" => ft.min_lr,
    "ft.warmup_epochs" => ft.warmup_epochs,
    "ft.weight_decay" => ft.weight_decay,
    "ft.mixup_alpha" => ft.mixup_alpha,
    "ft.label_smoothing" => ft.label_smoothing,
    "ft.crop_scale_min" => ft.crop_scale.0,
    "ft.crop_scale_max" => ft.crop_scale.1,
    "ft.flip_prob" => ft.flip_prob,
    "ft.clip_grad" => ft.clip_grad,
    "ft.eval_fold" => eval_fold,
    "ft.eval_batch" => eval_batch,
});

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, ssl, ft) = match preset {
            Preset::Desk => (CsvtConfig::desk(), SslConfig::desk(), FinetuneConfig::desk()),
            Preset::Paper => (CsvtConfig::paper(), SslConfig::paper(), FinetuneConfig::paper()),
        };
        Self {
            preset,
            seed: 0,
            model,
            ssl,
            ft,
            eval_fold: 0,
            eval_batch: 64,
            data_dir: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let preset = match pairs.iter().find(|(k, _, _)| k == "preset") {
            None => Preset::Paper,
            Some((_, v, _)) if v == "desk" => Preset::Desk,
            Some((_, v, _)) if v == "paper" => Preset::Paper,
            Some((_, v, line)) => {
                return Err(Error::Config(format!("line {line}: preset must be desk or paper, got {v}")))
            }
        };
        let mut cfg = Self::preset(preset);
        for (k, v, line) in pairs.iter().filter(|(k, _, _)| k != "preset") {
            cfg.set(k, v, *line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ssl.validate()?;
        let mc = &self.ssl.multi_crop;
        for size in [mc.global_size, mc.local_size] {
            if size == 0 || size % self.model.patch_size != 0 {
                return Err(Error::Config(format!(
                    "view size {size} is not a positive multiple of patch size {}",
                    self.model.patch_size
                )));
            }
        }
        let ordered = |(lo, hi): (f64, f64)| lo > 0.0 && lo < hi && hi <= 1.0;
        if !ordered(mc.global_scale) || !ordered(mc.local_scale) || !ordered(self.ft.crop_scale) {
            return Err(Error::Config("crop scale ranges must satisfy 0 < min < max <= 1".into()));
        }
        if self.ft.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration in the input syntax.
    pub fn resolved(&self) -> String {
        let mut out = format!("preset = {}\n", self.preset.name());
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

key_table!(SynthSpec {
    "image_size" => image_size,
    "samples_per_class" => samples_per_class,
    "seed" => seed,
    "hue_means" => hue_means,
    "hue_std" => hue_std,
    "saturation" => saturation,
    "saturation_std" => saturation_std,
    "value_means" => value_means,
    "value_std" => value_std,
    "texture_freq" => texture_freq,
    "texture_amplitude" => texture_amplitude,
    "stem_density" => stem_density,
    "noise" => noise,
    "folds" => folds,
});

impl SynthSpec {
    /// Defaults overridden by the keys in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (k, v, line) in parse_pairs(text)? {
            spec.set(&k, &v, line)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn resolved(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_paper_preset() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::preset(Preset::Paper));
        assert_eq!(RunConfig::parse("preset = desk").unwrap(), RunConfig::preset(Preset::Desk));
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse("preset = paper\n# comment\nft.epochs = 3  # trailing\nssl.stop_below_entropy = 2.5\n").unwrap();
        assert_eq!(cfg.model, CsvtConfig::paper());
        assert_eq!(cfg.ft.epochs, 3);
        assert_eq!(cfg.ssl.stop_below_entropy, Some(2.5));
    }

    #[test]
    fn unknown_duplicate_and_bad_values_rejected() {
        assert!(RunConfig::parse("model.depth = 3").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed = -1").is_err());
        assert!(RunConfig::parse("preset = huge").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("preset = desk\nmodel.embed_dim = 65").is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let cfg = RunConfig::parse("preset = desk\nft.lr = 0.002\ndata_dir = /tmp/x\nssl.centering = false").unwrap();
        assert_eq!(RunConfig::parse(&cfg.resolved()).unwrap(), cfg);
    }

    #[test]
    fn synth_spec_lists() {
        let spec = SynthSpec::parse("hue_means = 40, 60, 80, 100\nsamples_per_class = 3").unwrap();
        assert_eq!(spec.hue_means, [40.0, 60.0, 80.0, 100.0]);
        assert_eq!(spec.samples_per_class, 3);
        assert!(SynthSpec::parse("hue_means = 1, 2").is_err());
        assert_eq!(SynthSpec::parse(&spec.resolved()).unwrap(), spec);
    }
}
