//! Batch-norm versus instance-norm training under otherwise identical
//! settings.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::Result;
use crate::generator::{Generator, NormKind};
use crate::loss::FeatureExtractor;
use crate::train::{initial_generator, train_with, RunReport, TrainConfig, TrainData};

pub struct NormRun {
    pub generator: Generator,
    pub report: RunReport,
}

/// Both runs for one seed.
pub struct SeedComparison {
    pub seed: u64,
    pub batch: NormRun,
    pub instance: NormRun,
    /// Conv weights of the two starting generators agree bit for bit.
    pub same_initial_convs: bool,
    pub same_param_names: bool,
}

impl SeedComparison {
    pub fn ratio(&self) -> f64 {
        self.instance.report.final_loss() / self.batch.report.final_loss()
    }

    pub fn instance_wins(&self) -> bool {
        self.instance.report.final_loss() < self.batch.report.final_loss()
    }
}

/// Whether `a` and `b` start from the same conv weights and expose the same
/// parameter names and counts.
pub fn audit_initialization(a: &Generator, b: &Generator) -> (bool, bool) {
    let convs_a = a.conv_weight_names();
    let same_convs = convs_a == b.conv_weight_names()
        && convs_a.iter().all(|&n| {
            let (x, y) = (&a.params()[n], &b.params()[n]);
            x.shape() == y.shape()
                && x.data()
                    .iter()
                    .zip(y.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        });
    let same_names = a.params().keys().eq(b.params().keys()) && a.param_count() == b.param_count();
    (same_convs, same_names)
}

/// Trains a batch-norm and an instance-norm generator for every seed. Only
/// `config.generator.norm` differs between the two runs of a seed. Seeds run
/// in parallel; results come back in input order.
pub fn compare_norms(
    config: &TrainConfig,
    data: &TrainData,
    phi: &FeatureExtractor,
    seeds: &[u64],
) -> Result<Vec<SeedComparison>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let with = |norm| TrainConfig {
                seed,
                generator: config.generator.with_norm(norm),
                ..config.clone()
            };
            let (bn_cfg, in_cfg) = (with(NormKind::Batch), with(NormKind::Instance));
            let (same_initial_convs, same_param_names) =
                audit_initialization(&initial_generator(&bn_cfg)?, &initial_generator(&in_cfg)?);
            let (generator, report) = train_with(&bn_cfg, data, phi)?;
            let batch = NormRun { generator, report };
            let (generator, report) = train_with(&in_cfg, data, phi)?;
            let instance = NormRun { generator, report };
            Ok(SeedComparison {
                seed,
                batch,
                instance,
                same_initial_convs,
                same_param_names,
            })
        })
        .collect()
}

/// One row per seed, then the win count.
pub fn summary_table(rows: &[SeedComparison]) -> String {
    let mut out = String::from("seed batch_final instance_final instance_over_batch same_init\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{} {:.9e} {:.9e} {:.6} {}",
            r.seed,
            r.batch.report.final_loss(),
            r.instance.report.final_loss(),
            r.ratio(),
            r.same_initial_convs && r.same_param_names
        );
    }
    let wins = rows.iter().filter(|r| r.instance_wins()).count();
    let _ = writeln!(out, "# instance lower in {wins} of {} seeds", rows.len());
    out
}
