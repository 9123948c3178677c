use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::{EvalCell, EvalMatrix};
use super::metrics::{accuracy, average_precision};
use crate::data::{Protocol, Split, SplitBundle};
use crate::detector::{
    predict_samples, prepare_samples, train_detector, Detector, DetectorConfig, DetectorHyper, DetectorSample,
    DetectorTrainReport,
};
use crate::diffusion::EpsilonNetwork;
use crate::probe::{batch_probe, NoiseCache};
use crate::{Error, Result};

/// Row label used by the standard protocol, which trains on every generator.
pub const ALL_GENERATORS: &str = "all";

/// Split manifests plus cached noise for one protocol run.
pub struct ProtocolData<'a> {
    pub train: &'a SplitBundle,
    /// The same bundle as `train` except under the cross-dataset protocol.
    pub test: &'a SplitBundle,
    /// Row label for the cross-dataset protocol.
    pub train_name: &'a str,
    pub cache: Option<&'a NoiseCache>,
    pub probe_id: Option<&'a str>,
}

#[derive(Debug)]
pub struct TrainedRow {
    pub train_generator: String,
    pub detector: Detector,
    pub report: DetectorTrainReport,
    /// Content hashes of every training row.
    pub train_hashes: Vec<String>,
}

#[derive(Debug)]
pub struct ProtocolRun {
    pub matrix: EvalMatrix,
    pub rows: Vec<TrainedRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub timestep: usize,
    pub matrix: EvalMatrix,
}

/// Training and validation samples of one matrix row.
type Plan = (Vec<DetectorSample>, Vec<DetectorSample>);

/// Trains one detector per matrix row and scores every cell.
///
/// - standard: one row trained on all training rows, one column per test
///   generator;
/// - cross-dataset: train on `data.train`, test on `data.test`'s generators;
/// - cross-model: one row per generator, trained on the shared reals plus
///   that generator's fakes, tested on every generator.
///
/// Test cells pair the shared held-out reals with one generator's test
/// fakes. A generator without test fakes yields an absent cell.
pub fn run_protocol(
    protocol: Protocol,
    data: &ProtocolData,
    cfg: &DetectorConfig,
    hyper: &DetectorHyper,
) -> Result<ProtocolRun> {
    let prep = |rows: Vec<&crate::data::ManifestRow>| prepare_samples(&rows, data.cache, data.probe_id, cfg);
    let (row_names, plans): (Vec<String>, Vec<Plan>) = match protocol {
        Protocol::Standard | Protocol::CrossDataset => {
            let name = if protocol == Protocol::Standard {
                ALL_GENERATORS
            } else {
                data.train_name
            };
            let plan = (prep(data.train.rows(Split::Train))?, prep(data.train.rows(Split::Val))?);
            (vec![name.to_string()], vec![plan])
        }
        Protocol::CrossModel => {
            let gens = data.train.generators();
            if gens.is_empty() {
                return Err(Error::InsufficientRows("no fake generators".into()));
            }
            let mut plans = Vec::new();
            for g in &gens {
                plans.push((
                    prep(data.train.generator_rows(g, Split::Train))?,
                    prep(data.train.generator_rows(g, Split::Val))?,
                ));
            }
            (gens, plans)
        }
    };

    let columns = data.test.generators();
    let test_reals = prep(data.test.reals(Split::Test))?;
    let test_fakes: Vec<Vec<DetectorSample>> = columns
        .iter()
        .map(|g| prep(data.test.fakes(g, Split::Test)))
        .collect::<Result<_>>()?;
    let test_hashes: HashSet<&str> = test_reals
        .iter()
        .chain(test_fakes.iter().flatten())
        .map(|s| s.image_hash.as_str())
        .collect();

    let mut trained = Vec::new();
    let mut cells = Vec::new();
    let mut real_acc = Vec::new();
    for (name, (train, val)) in row_names.iter().zip(plans) {
        if let Some(s) = train.iter().find(|s| test_hashes.contains(s.image_hash.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "training rows for `{name}` overlap the test set (hash {})",
                s.image_hash
            )));
        }
        log::info!(
            "{protocol}: training detector for row `{name}` on {} samples",
            train.len()
        );
        let (detector, report) = train_detector(&train, &val, cfg.clone(), data.probe_id.map(str::to_string), hyper)?;
        let real_preds = predict_samples(&detector, &test_reals)?;
        real_acc.push(if test_reals.is_empty() {
            None
        } else {
            Some(accuracy(&real_preds, &vec![0.0; test_reals.len()])?)
        });
        for (col, fakes) in columns.iter().zip(&test_fakes) {
            if fakes.is_empty() || test_reals.is_empty() {
                log::warn!("cell ({name}, {col}) has no test images for one class; marked absent");
                cells.push(None);
                continue;
            }
            let mut preds = real_preds.clone();
            preds.extend(predict_samples(&detector, fakes)?);
            let mut labels = vec![0.0; test_reals.len()];
            labels.extend(std::iter::repeat_n(1.0, fakes.len()));
            let scores: Vec<f64> = preds.iter().map(|p| p.probability).collect();
            cells.push(Some(EvalCell {
                train_generator: name.clone(),
                test_generator: col.clone(),
                acc: accuracy(&preds, &labels)?,
                ap: average_precision(&scores, &labels)?,
                n_real: test_reals.len(),
                n_fake: fakes.len(),
            }));
        }
        trained.push(TrainedRow {
            train_generator: name.clone(),
            detector,
            report,
            train_hashes: train.iter().map(|s| s.image_hash.clone()).collect(),
        });
    }
    let matrix = EvalMatrix::new(protocol, row_names, columns, cells, real_acc)?;
    Ok(ProtocolRun { matrix, rows: trained })
}

/// Re-probes, retrains and re-evaluates at each timestep.
#[allow(clippy::too_many_arguments)]
pub fn sweep_timestep(
    t_values: &[usize],
    protocol: Protocol,
    train: &SplitBundle,
    test: &SplitBundle,
    probe: &EpsilonNetwork,
    cache_dir: &Path,
    cfg: &DetectorConfig,
    hyper: &DetectorHyper,
) -> Result<Vec<SweepPoint>> {
    if t_values.is_empty() {
        return Err(Error::Empty("timestep list".into()));
    }
    for &t in t_values {
        probe.schedule().check_t(t)?;
    }
    let probe_id = probe.id();
    let mut out = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let (mut cache, _) = batch_probe(train.manifest(), t, probe, cache_dir)?;
        if !std::ptr::eq(train, test) {
            cache = batch_probe(test.manifest(), t, probe, cache_dir)?.0;
        }
        let cfg = DetectorConfig {
            timestep: t,
            ..cfg.clone()
        };
        let data = ProtocolData {
            train,
            test,
            train_name: "train",
            cache: Some(&cache),
            probe_id: Some(&probe_id),
        };
        let run = run_protocol(protocol, &data, &cfg, hyper)?;
        log::info!("sweep t = {t}: mean acc {:?}", run.matrix.mean_acc);
        out.push(SweepPoint {
            timestep: t,
            matrix: run.matrix,
        });
    }
    Ok(out)
}
