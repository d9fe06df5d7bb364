//! Experiment assembly: domains, training protocols and the ablation matrix.

use super::eval::{detect, evaluate_model, scored_classes, ApMetric, EvalReport};
use super::model::{Model, ModelConfig, Sample, StepOutput, Toggles};
use super::{Adam, TrainConfig, TrainMode};
use crate::config::Config;
use crate::datasets::synthetic::{generate_frame, ClassModel, SizeDist, SyntheticDomainConfig};
use crate::datasets::{read_frame_dir, subsample, DatasetSpec, DropCounter, Frame};
use crate::error::{Error, Result};
use crate::geometry::Range3D;
use std::path::{Path, PathBuf};

/// Seed offset separating held-out synthetic frames from training frames.
pub const TEST_SEED_OFFSET: u64 = 1_000_000;

/// The two built-in synthetic domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainPreset {
    /// Short range, 1.6 m sensor, dense, compact cars.
    A,
    /// Three times the range, 1.8 m sensor, half the beam density, larger cars.
    B,
}

pub fn preset_spec(p: DomainPreset) -> DatasetSpec {
    let (name, half, height, ground, beam, objects, mean) = match p {
        DomainPreset::A => ("a", 9.6, 1.6, 600, 1.0, (1, 4), [3.9, 1.7, 1.5]),
        DomainPreset::B => ("b", 28.8, 1.8, 3600, 0.5, (7, 27), [4.8, 2.0, 1.8]),
    };
    let range = Range3D::new([-half, half], [-half, half], [-3.0, 3.0]).expect("static range");
    let std = [0.2, 0.1, 0.1];
    let size = SizeDist {
        mean,
        std,
        min: [mean[0] - 3.0 * std[0], mean[1] - 3.0 * std[1], mean[2] - 3.0 * std[2]],
        max: [mean[0] + 3.0 * std[0], mean[1] + 3.0 * std[1], mean[2] + 3.0 * std[2]],
    };
    let mut spec = DatasetSpec::new(name, range);
    spec.dz_shift = height;
    spec.classes = vec![0];
    spec.taxonomy = [("Car".to_string(), 0)].into_iter().collect();
    spec.synthetic = Some(SyntheticDomainConfig {
        seed: match p {
            DomainPreset::A => 11,
            DomainPreset::B => 23,
        },
        range,
        sensor_height: height,
        ground_points: ground,
        surface_density: 20.0,
        beam_density: beam,
        objects_min: objects.0,
        objects_max: objects.1,
        yaw_range: (-0.6, 0.6),
        noise_std: 0.02,
        classes: vec![ClassModel {
            class_id: 0,
            weight: 1.0,
            size,
        }],
    });
    spec
}

/// One dataset with its training and held-out frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub spec: DatasetSpec,
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
}

impl Domain {
    /// Generates `n_train` + `n_test` frames from the spec's synthetic section.
    pub fn synthetic(spec: DatasetSpec, n_train: usize, n_test: usize) -> Result<Self> {
        let syn = spec
            .synthetic
            .clone()
            .ok_or_else(|| Error::Config(format!("dataset `{}` has no synthetic section", spec.name)))?;
        let gen = |seeds: std::ops::Range<u64>| seeds.map(|s| generate_frame(&syn, 0, s)).collect::<Result<Vec<_>>>();
        Ok(Self {
            train: gen(0..n_train as u64)?,
            test: gen(TEST_SEED_OFFSET..TEST_SEED_OFFSET + n_test as u64)?,
            spec,
        })
    }

    /// Reads frame directories (see [`read_frame_dir`]).
    pub fn from_dirs(spec: DatasetSpec, train_dir: &Path, test_dir: &Path, drops: &mut DropCounter) -> Result<Self> {
        Ok(Self {
            train: read_frame_dir(train_dir, &spec, 0, drops)?,
            test: read_frame_dir(test_dir, &spec, 0, drops)?,
            spec,
        })
    }
}

fn relabel(frames: &[Frame], id: usize) -> Vec<Frame> {
    frames
        .iter()
        .map(|f| Frame {
            dataset_id: id,
            ..f.clone()
        })
        .collect()
}

/// Held-out domain scored through the head of a training dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShot {
    pub domain: Domain,
    /// Name of the donor dataset.
    pub donor: String,
}

/// One row of the ablation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    /// Architecture template; its dataset list is replaced by the run's domains.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Per-step record handed to loggers.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<'a> {
    /// `train`, `pretrain:<target>` or `finetune:<target>` / `separate:<name>`.
    pub phase: &'a str,
    pub step: usize,
    pub out: &'a StepOutput,
}

fn config_for(template: &ModelConfig, specs: Vec<DatasetSpec>) -> ModelConfig {
    ModelConfig {
        datasets: specs,
        ..template.clone()
    }
}

fn prepare_all(model: &Model, frames: &[Frame], spec: &DatasetSpec) -> Result<Vec<Sample>> {
    frames.iter().map(|f| model.prepare_with(f, spec)).collect()
}

fn train_samples(model: &Model, domains: &[(&Domain, usize)], tc: &TrainConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for &(d, id) in domains {
        let kept = subsample(&d.train, tc.fraction_for(&d.spec.name), tc.seed)?;
        out.extend(prepare_all(model, &relabel(&kept, id), &d.spec)?);
    }
    Ok(out)
}

/// Trained model plus its final optimizer state.
pub struct Trained {
    pub model: Model,
    pub optimizer: Adam,
}

/// Trains one model on all `domains` jointly (dataset ids follow the slice order).
pub fn train_joint(
    template: &ModelConfig,
    tc: &TrainConfig,
    domains: &[&Domain],
    log: &mut dyn FnMut(StepRecord),
) -> Result<Trained> {
    let cfg = config_for(template, domains.iter().map(|d| d.spec.clone()).collect());
    let mut model = Model::new(cfg, tc.seed)?;
    let ids: Vec<(&Domain, usize)> = domains.iter().copied().zip(0..).collect();
    let samples = train_samples(&model, &ids, tc)?;
    let mut optimizer = Adam::new(&model.params, tc.weight_decay);
    model.fit(&mut optimizer, &samples, tc, |step, out| log(StepRecord { phase: "train", step, out }))?;
    Ok(Trained { model, optimizer })
}

/// Scores the test frames of `domain` routed through dataset `route` and
/// files them under `label`.
pub fn score_domain(model: &Model, report: &mut EvalReport, domain: &Domain, route: usize, label: &str) -> Result<()> {
    let samples = prepare_all(model, &relabel(&domain.test, route), &domain.spec)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let frames = detect(model, &refs, Some(route))?;
    report.add(label, &scored_classes(model, &domain.spec.classes), &frames);
    Ok(())
}

/// Scores a jointly trained model on every domain (ids follow the slice
/// order) and on the held-out domain, which is filed as `<name>@zero-shot`.
pub fn score(model: &Model, domains: &[Domain], zero_shot: Option<&ZeroShot>) -> Result<EvalReport> {
    let test: Vec<Sample> = domains
        .iter()
        .enumerate()
        .map(|(i, d)| prepare_all(model, &relabel(&d.test, i), &d.spec))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut report = evaluate_model(model, &test)?;
    if let Some(z) = zero_shot {
        let donor = model.cfg.dataset_index(&z.donor)?;
        score_domain(model, &mut report, &z.domain, donor, &format!("{}@zero-shot", z.domain.spec.name))?;
    }
    Ok(report)
}

/// Trains and scores one configuration on `domains`.
pub fn run(cfg: &RunConfig, domains: &[Domain], zero_shot: Option<&ZeroShot>, log: &mut dyn FnMut(StepRecord)) -> Result<EvalReport> {
    if domains.is_empty() {
        return Err(Error::Config("no domains to train on".into()));
    }
    let tc = &cfg.train;
    let mut report = EvalReport::default();
    match tc.mode {
        TrainMode::Scratch => {
            let refs: Vec<&Domain> = domains.iter().collect();
            let t = train_joint(&cfg.model, tc, &refs, log)?;
            report = score(&t.model, domains, zero_shot)?;
        }
        TrainMode::Separate => {
            for d in domains {
                let phase = format!("separate:{}", d.spec.name);
                let t = train_joint(&cfg.model, tc, &[d], &mut |r| log(StepRecord { phase: &phase, ..r }))?;
                score_domain(&t.model, &mut report, d, 0, &d.spec.name)?;
            }
        }
        TrainMode::PretrainFinetune => {
            if domains.len() < 2 {
                return Err(Error::Config("pretrain_then_finetune needs at least two domains".into()));
            }
            let pre_steps = ((tc.steps as f64 * tc.pretrain_fraction).round() as usize).max(1);
            if pre_steps >= tc.steps {
                return Err(Error::Config(format!("{} steps leave nothing for fine-tuning", tc.steps)));
            }
            for (t, target) in domains.iter().enumerate() {
                let mut model = Model::new(config_for(&cfg.model, vec![target.spec.clone()]), tc.seed)?;
                let others: Vec<(&Domain, usize)> =
                    domains.iter().enumerate().filter(|&(i, _)| i != t).map(|(_, d)| (d, 0)).collect();
                let pre = TrainConfig {
                    steps: pre_steps,
                    batch_size: tc.batch_size,
                    ..tc.clone()
                };
                let samples = train_samples(&model, &others, &pre)?;
                let mut opt = Adam::new(&model.params, tc.weight_decay);
                let phase = format!("pretrain:{}", target.spec.name);
                model.fit(&mut opt, &samples, &pre, |step, out| log(StepRecord { phase: &phase, step, out }))?;
                let fine = TrainConfig {
                    steps: tc.steps - pre_steps,
                    ..tc.clone()
                };
                let samples = train_samples(&model, &[(target, 0)], &fine)?;
                let mut opt = Adam::new(&model.params, tc.weight_decay);
                let phase = format!("finetune:{}", target.spec.name);
                model.fit(&mut opt, &samples, &fine, |step, out| log(StepRecord { phase: &phase, step, out }))?;
                score_domain(&model, &mut report, target, 0, &target.spec.name)?;
            }
        }
    }
    Ok(report)
}

/// One trained `(config, seed)` cell of the matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

impl AblationReport {
    /// Median over seeds of `config`'s AP; `dataset = None` takes the
    /// cross-dataset average.
    pub fn median(&self, config: &str, dataset: Option<&str>, class_id: usize, metric: ApMetric) -> Option<f64> {
        let mut v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.config == config)
            .filter_map(|r| match dataset {
                None => r.report.average(class_id, metric),
                Some(d) => r.report.get(d, class_id).map(|e| match metric {
                    ApMetric::Bev => e.ap_bev,
                    ApMetric::ThreeD => e.ap_3d,
                }),
            })
            .collect();
        median(&mut v)
    }

    /// `config,seed,dataset,class,ap_bev,ap_3d`, averages included.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,seed,dataset,class,ap_bev,ap_3d\n");
        for r in &self.rows {
            for line in r.report.csv_rows(&r.config).lines() {
                let (config, rest) = line.split_once(',').expect("csv row");
                s += &format!("{config},{},{rest}\n", r.seed);
            }
        }
        s
    }
}

/// Trains every configuration under every seed (the seed replaces
/// `train.seed`) and scores it on every domain.
pub fn ablation_runner(
    matrix: &[RunConfig],
    domains: &[Domain],
    seeds: &[u64],
    zero_shot: Option<&ZeroShot>,
    log: &mut dyn FnMut(&str, u64, StepRecord),
) -> Result<AblationReport> {
    if matrix.is_empty() {
        return Err(Error::Config("ablation matrix has no configurations".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation matrix has no seeds".into()));
    }
    let mut report = AblationReport::default();
    for cfg in matrix {
        for &seed in seeds {
            let seeded = RunConfig {
                train: TrainConfig { seed, ..cfg.train.clone() },
                ..cfg.clone()
            };
            let r = run(&seeded, domains, zero_shot, &mut |rec| log(&cfg.name, seed, rec))?;
            report.rows.push(AblationRow {
                config: cfg.name.clone(),
                seed,
                report: r,
            });
        }
    }
    Ok(report)
}

/// Experiment described by one config document.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub domains: Vec<Domain>,
    pub zero_shot: Option<ZeroShot>,
}

fn resolve(root: Option<&Path>, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p,
    }
}

fn load_domain(c: &Config, spec: DatasetSpec, root: Option<&Path>) -> Result<Domain> {
    let s = c.section(&format!("dataset.{}", spec.name));
    match (s.get("train_dir"), s.get("test_dir")) {
        (Some(tr), Some(te)) => {
            let mut drops = DropCounter::default();
            Domain::from_dirs(spec, &resolve(root, tr), &resolve(root, te), &mut drops)
        }
        (None, None) => Domain::synthetic(spec, s.parse_or("train_frames", 200)?, s.parse_or("test_frames", 40)?),
        _ => Err(Error::Config(format!(
            "dataset `{}` needs both train_dir and test_dir",
            spec.name
        ))),
    }
}

impl Experiment {
    /// Model and dataset keys as in [`ModelConfig::from_config`], training
    /// keys under `train.`, per dataset either `train_dir`/`test_dir` (made
    /// relative to `data_root`) or `train_frames`/`test_frames` for synthetic
    /// domains, and optionally `zero_shot.dataset`/`zero_shot.donor`.
    pub fn from_config(c: &Config, data_root: Option<&Path>) -> Result<Self> {
        let model = ModelConfig::from_config(c)?;
        let train = TrainConfig::from_config(&c.section("train"))?;
        let domains = model
            .datasets
            .iter()
            .map(|spec| load_domain(c, spec.clone(), data_root))
            .collect::<Result<Vec<_>>>()?;
        let zero_shot = match c.get("zero_shot.dataset") {
            None => None,
            Some(name) => {
                if model.dataset_index(name).is_ok() {
                    return Err(Error::Config(format!("zero-shot dataset `{name}` is also a training dataset")));
                }
                let spec = DatasetSpec::from_config(&c.section(&format!("dataset.{name}")))?;
                let donor = c.require("zero_shot.donor")?.to_string();
                model.dataset_index(&donor)?;
                Some(ZeroShot {
                    domain: load_domain(c, spec, data_root)?,
                    donor,
                })
            }
        };
        Ok(Self {
            model,
            train,
            domains,
            zero_shot,
        })
    }
}

/// Matrix rows from `ablation.configs = n1,n2,...`; each row applies its
/// `ablation.<name>.<key> = value` overrides to `c` (for example
/// `ablation.dm.model.preset = dm`). A bare preset name needs no overrides.
pub fn matrix_from_config(c: &Config) -> Result<(Vec<RunConfig>, Vec<u64>)> {
    let names: Vec<String> = c.list("ablation.configs")?.unwrap_or_default();
    if names.is_empty() {
        return Err(Error::Config("ablation.configs lists no configurations".into()));
    }
    let seeds: Vec<u64> = c.list("ablation.seeds")?.unwrap_or_else(|| vec![0, 1, 2, 3, 4]);
    let mut matrix = Vec::new();
    for name in names {
        let mut merged = c.clone();
        let overrides = c.section(&format!("ablation.{name}"));
        if overrides.keys().next().is_none() && Toggles::preset(&name).is_ok() {
            merged.set("model.preset", &name);
        }
        for (k, v) in overrides.iter() {
            merged.set(k, v);
        }
        matrix.push(RunConfig {
            model: ModelConfig::from_config(&merged)?,
            train: TrainConfig::from_config(&merged.section("train"))?,
            name,
        });
    }
    Ok((matrix, seeds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn tiny_template() -> ModelConfig {
        let mut cfg = ModelConfig::new(vec![], Range3D::new([-4.8, 4.8], [-4.8, 4.8], [-3.0, 3.0]).unwrap(), 0.8);
        cfg.encoder = EncoderConfig {
            pillar_channels: 4,
            channels: 4,
        };
        cfg.se_reduction = 2;
        cfg
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            steps: 4,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    fn domains() -> Vec<Domain> {
        vec![
            Domain::synthetic(preset_spec(DomainPreset::A), 3, 2).unwrap(),
            Domain::synthetic(preset_spec(DomainPreset::B), 3, 2).unwrap(),
        ]
    }

    #[test]
    fn one_config_one_seed_gives_one_row() {
        let cfg = RunConfig {
            name: "full".into(),
            model: tiny_template(),
            train: tiny_train(),
        };
        let r = ablation_runner(&[cfg], &domains(), &[7], None, &mut |_, _, _| {}).unwrap();
        assert_eq!(r.rows.len(), 1);
        let rep = &r.rows[0].report;
        let mean = (rep.get("a", 0).unwrap().ap_3d + rep.get("b", 0).unwrap().ap_3d) / 2.0;
        assert_eq!(rep.average(0, ApMetric::ThreeD), Some(mean));
        assert!(matches!(ablation_runner(&[], &domains(), &[0], None, &mut |_, _, _| {}), Err(Error::Config(_))));
    }

    #[test]
    fn protocols_score_every_domain() {
        let d = domains();
        for mode in [TrainMode::Separate, TrainMode::PretrainFinetune] {
            let cfg = RunConfig {
                name: "x".into(),
                model: tiny_template(),
                train: TrainConfig { mode, ..tiny_train() },
            };
            let rep = run(&cfg, &d, None, &mut |_| {}).unwrap();
            assert!(rep.get("a", 0).is_some() && rep.get("b", 0).is_some());
        }
    }

    #[test]
    fn zero_shot_adds_held_out_entry() {
        let d = domains();
        let z = ZeroShot {
            domain: Domain {
                spec: DatasetSpec {
                    name: "c".into(),
                    ..preset_spec(DomainPreset::A)
                },
                ..d[0].clone()
            },
            donor: "b".into(),
        };
        let cfg = RunConfig {
            name: "full".into(),
            model: tiny_template(),
            train: tiny_train(),
        };
        let rep = run(&cfg, &d, Some(&z), &mut |_| {}).unwrap();
        assert!(rep.get("c@zero-shot", 0).is_some());
    }

    #[test]
    fn matrix_overrides_apply() {
        // toggles left to the presets
        let mut text: String = tiny_template()
            .to_config_text()
            .replace("datasets = \n", "datasets = a\n")
            .lines()
            .filter(|l| !["coord_align", "stat_align", "coupling", "attention", "model.se ", "dataset_heads", "range_aligned"].iter().any(|k| l.contains(k)))
            .map(|l| format!("{l}\n"))
            .collect();
        for line in preset_spec(DomainPreset::A).to_config_text().lines() {
            text += &format!("dataset.a.{line}\n");
        }
        text += "ablation.configs = dm,mine\nablation.seeds = 1,2\nablation.mine.model.se = false\n";
        let (m, seeds) = matrix_from_config(&Config::parse(&text).unwrap()).unwrap();
        assert_eq!(seeds, vec![1, 2]);
        assert_eq!(m[0].model.toggles, Toggles::direct_merge());
        assert!(!m[1].model.toggles.se && m[1].model.toggles.coupling);
        let empty = Config::parse(&text.replace("ablation.configs = dm,mine", "ablation.configs =")).unwrap();
        assert!(matrix_from_config(&empty).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
