//! Turns parsed arguments into datasets and core configurations.

use std::collections::BTreeMap;

use mcref_core::active::{ALConfig, ALData, Fallback, Strategy};
use mcref_core::data::{
    generate_synthetic, load_csv, load_idx_images, split, SplitSpec, Splits, Standardizer,
    SyntheticSpec,
};
use mcref_core::nn::{LayerSpec, NetworkConfig, TrainConfig};
use mcref_core::rng::derive_seed;
use mcref_core::uncertainty::{McConfig, SigmaFormula};
use mcref_core::Dataset;

use crate::args::{
    AlArgs, DataArgs, DataSource, FallbackArg, McArgs, NetArgs, SigmaArg, SplitName, StrategyArg,
    TrainArgs,
};
use crate::error::{CliError, CliResult};

/// Seed paths under `--seed`, one per consumer.
pub mod seeds {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const MC: u64 = 5;
}

pub fn sub_seed(seed: u64, path: u64) -> u64 {
    derive_seed(seed, &[path])
}

/// Split fractions when `--split` is absent: supervised commands use no
/// pool, active learning uses no fixed training split.
pub const SUPERVISED_SPLIT: [f64; 4] = [0.6, 0.2, 0.2, 0.0];
pub const ACTIVE_SPLIT: [f64; 4] = [0.0, 0.1, 0.2, 0.7];

#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: Splits,
    pub normalisation: Option<Standardizer>,
    pub num_classes: usize,
}

impl Prepared {
    pub fn get(&self, name: SplitName) -> &Dataset {
        match name {
            SplitName::Train => &self.splits.train,
            SplitName::Val => &self.splits.val,
            SplitName::Test => &self.splits.test,
            SplitName::Pool => &self.splits.pool,
        }
    }

    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.splits.checksums()
    }
}

fn load(args: &DataArgs, seed: u64) -> CliResult<Dataset> {
    let data = match args.data {
        DataSource::Synthetic => {
            let spec = SyntheticSpec::two_class(
                args.samples,
                args.dim,
                args.bayes_error,
                sub_seed(seed, seeds::DATA),
            )?;
            generate_synthetic(&spec)?
        }
        DataSource::Csv => {
            let path = args
                .csv
                .as_ref()
                .ok_or_else(|| CliError::usage("--data csv needs --csv FILE"))?;
            load_csv(path, args.num_classes)?
        }
        DataSource::Idx => {
            let (Some(images), Some(labels)) = (&args.idx_images, &args.idx_labels) else {
                return Err(CliError::usage(
                    "--data idx needs --idx-images and --idx-labels",
                ));
            };
            load_idx_images(images, labels)?
        }
    };
    if let Some(k) = args.num_classes {
        if data.num_classes() > k {
            return Err(CliError::usage(format!(
                "labels reach class {} but --num-classes is {k}",
                data.num_classes() - 1
            )));
        }
    }
    Ok(data)
}

/// Loads, splits and (unless disabled) standardises the data. The
/// standardiser is fitted on the rows a model may learn from: train ∪ pool.
pub fn prepare(args: &DataArgs, default_split: [f64; 4], seed: u64) -> CliResult<Prepared> {
    let data = load(args, seed)?;
    let fractions = match &args.split {
        Some(v) => <[f64; 4]>::try_from(v.as_slice())
            .map_err(|_| CliError::usage("--split takes four fractions: train,val,test,pool"))?,
        None => default_split,
    };
    let spec = SplitSpec {
        train: fractions[0],
        val: fractions[1],
        test: fractions[2],
        pool: fractions[3],
        stratified: !args.no_stratify,
        seed: sub_seed(seed, seeds::SPLIT),
    };
    let raw = split(&data, &spec)?;
    let num_classes = args.num_classes.unwrap_or(data.num_classes());
    if args.no_standardize {
        return Ok(Prepared {
            splits: raw,
            normalisation: None,
            num_classes,
        });
    }
    let fit_on = raw.train.concat(&raw.pool)?;
    if fit_on.is_empty() {
        return Err(CliError::usage(
            "standardisation needs a non-empty train or pool split",
        ));
    }
    let norm = Standardizer::fit(&fit_on)?;
    let splits = Splits {
        train: norm.transform(&raw.train)?,
        val: norm.transform(&raw.val)?,
        test: norm.transform(&raw.test)?,
        pool: norm.transform(&raw.pool)?,
    };
    Ok(Prepared {
        splits,
        normalisation: Some(norm),
        num_classes,
    })
}

pub fn network_config(
    args: &NetArgs,
    input_dim: usize,
    num_classes: usize,
    seed: u64,
) -> CliResult<NetworkConfig> {
    let hidden = args.hidden.iter().map(|&w| LayerSpec::relu(w)).collect();
    let cfg = NetworkConfig::new(input_dim, num_classes, hidden)
        .with_dropout(args.alpha, args.beta)
        .with_l2(args.l2)
        .with_seed(sub_seed(seed, seeds::INIT));
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config(args: &TrainArgs, seed: u64) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        lr_decay_factor: args.lr_decay,
        lr_decay_every_epochs: args.decay_every,
        batch_size: args.batch_size,
        max_epochs: args.epochs,
        seed: sub_seed(seed, seeds::TRAIN),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn mc_config(args: &McArgs, seed: u64) -> CliResult<McConfig> {
    let cfg = McConfig {
        passes: args.passes,
        base_seed: sub_seed(seed, seeds::MC),
        sigma_formula: match args.sigma_formula {
            SigmaArg::PaperLiteral => SigmaFormula::PaperLiteral,
            SigmaArg::SampleStd => SigmaFormula::SampleStd,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn strategy(s: StrategyArg) -> Strategy {
    match s {
        StrategyArg::McDropoutVariance => Strategy::McDropoutVariance,
        StrategyArg::LeastConfidence => Strategy::LeastConfidence,
        StrategyArg::Random => Strategy::Random,
    }
}

/// Everything an active-learning command needs before it starts.
pub struct ActiveSetup {
    pub prepared: Prepared,
    pub data: ALData,
    pub network: NetworkConfig,
    pub config: ALConfig,
    pub strategies: Vec<Strategy>,
}

pub fn active(args: &AlArgs, seed: u64) -> CliResult<ActiveSetup> {
    let prepared = prepare(&args.data, ACTIVE_SPLIT, seed)?;
    let data = ALData::from_splits(&prepared.splits)?;
    if data.candidates.is_empty() {
        return Err(CliError::usage(
            "active learning needs a non-empty train or pool split",
        ));
    }
    if data.validation.is_empty() {
        return Err(CliError::usage(
            "active learning needs a non-empty validation split",
        ));
    }
    let network = network_config(
        &args.net,
        data.candidates.input_dim(),
        prepared.num_classes,
        seed,
    )?;
    let strategies: Vec<Strategy> = args.strategy.iter().copied().map(strategy).collect();
    if strategies.is_empty() {
        return Err(CliError::usage("--strategy needs at least one value"));
    }
    let config = ALConfig {
        kappa: args.kappa,
        tau: args.tau,
        strategy: strategies[0],
        fallback: match args.fallback {
            FallbackArg::TopKappa => Fallback::TopKappa,
            FallbackArg::None => Fallback::None,
        },
        target_accuracy: args.target,
        patience: args.patience,
        initial_labelled_fraction: args.initial_fraction,
        fine_tune_epochs: args.fine_tune_epochs,
        retrain_from_scratch: args.retrain_from_scratch,
        max_iterations: args.max_iterations,
        mc: mc_config(&args.mc, seed)?,
        train: train_config(&args.train, seed)?,
        seed,
    };
    config.validate()?;
    Ok(ActiveSetup {
        prepared,
        data,
        network,
        config,
        strategies,
    })
}
