//! Cached per-target-sample predictions and their refresh schedule.

use std::path::Path;

use rand::Rng;

use crate::data::UnlabeledDataset;
use crate::error::{Result, UfalError};
use crate::model::{mc_dropout_from_feature, ModelBundle, UncertaintyRecord};
use crate::numeric::{argmax, softmax, top_k_sum};

pub const DEFAULT_REFRESH_PERIOD: usize = 50;
pub const DEFAULT_RESAMPLE_PERIOD: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelStore {
    /// Indexed by target sample id.
    pub records: Vec<UncertaintyRecord>,
    pub last_refresh_step: Option<usize>,
    pub refresh_period: usize,
    pub resample_period: usize,
}

impl Default for PseudoLabelStore {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            last_refresh_step: None,
            refresh_period: DEFAULT_REFRESH_PERIOD,
            resample_period: DEFAULT_RESAMPLE_PERIOD,
        }
    }
}

impl PseudoLabelStore {
    pub fn new(refresh_period: usize, resample_period: usize) -> Result<Self> {
        if refresh_period == 0 || resample_period == 0 {
            return Err(UfalError::InvalidArgument("periods must be at least 1".into()));
        }
        Ok(Self {
            refresh_period,
            resample_period,
            ..Self::default()
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn due_for_refresh(&self, current_step: usize) -> bool {
        match self.last_refresh_step {
            _ if self.records.is_empty() => true,
            None => true,
            Some(last) => current_step.saturating_sub(last) >= self.refresh_period,
        }
    }

    pub fn due_for_resample(&self, current_step: usize) -> bool {
        current_step % self.resample_period == 0
    }

    /// Recomputes feature, `p`, `p_hat` and `p_tilde` for every target sample.
    /// Batch-norm layers run on their population statistics.
    pub fn refresh(
        &mut self,
        model: &ModelBundle,
        target: &UnlabeledDataset,
        n_mc: usize,
        rate: f64,
        rng: &mut impl Rng,
        step: usize,
    ) -> Result<()> {
        if target.is_empty() {
            return Err(UfalError::EmptyDataset);
        }
        let (features, logits) = model.forward_eval(target.inputs.view())?;
        let mut records = Vec::with_capacity(target.len());
        for (feature, logit) in features.outer_iter().zip(logits.outer_iter()) {
            records.push(self::record(model, feature.to_vec(), logit.to_vec(), n_mc, rate, rng)?);
        }
        self.records = records;
        self.last_refresh_step = Some(step);
        Ok(())
    }

    /// Recomputes only the given ids; the store must already hold every sample.
    pub fn refresh_subset(
        &mut self,
        model: &ModelBundle,
        target: &UnlabeledDataset,
        ids: &[usize],
        n_mc: usize,
        rate: f64,
        rng: &mut impl Rng,
        step: usize,
    ) -> Result<()> {
        if self.records.len() != target.len() {
            return Err(UfalError::InvalidArgument(
                "subset refresh needs a fully populated store".into(),
            ));
        }
        for &id in ids {
            let row = target.inputs.row(id).insert_axis(ndarray::Axis(0));
            let (features, logits) = model.forward_eval(row)?;
            self.records[id] = record(
                model,
                features.row(0).to_vec(),
                logits.row(0).to_vec(),
                n_mc,
                rate,
                rng,
            )?;
        }
        self.last_refresh_step = Some(step);
        Ok(())
    }

    /// Writes `sample_id,p_hat,max_p,top_k_p_tilde` rows.
    pub fn dump_csv(&self, path: &Path, k: usize) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["sample_id", "p_hat", "max_p", "top_k_p_tilde"])?;
        for (id, r) in self.records.iter().enumerate() {
            writer.write_record([
                id.to_string(),
                r.p_hat.to_string(),
                r.confidence().to_string(),
                top_k_sum(&r.p_tilde, k).to_string(),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn record(
    model: &ModelBundle,
    feature: Vec<f64>,
    logits: Vec<f64>,
    n_mc: usize,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<UncertaintyRecord> {
    let p = softmax(&logits);
    let p_tilde = mc_dropout_from_feature(&model.classifier, &feature, n_mc, rate, rng)?;
    Ok(UncertaintyRecord {
        p_hat: argmax(&p),
        p,
        p_tilde,
        feature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict, Architecture};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn target() -> UnlabeledDataset {
        UnlabeledDataset {
            inputs: array![[0.5, -1.0], [2.0, 0.25]],
            class_names: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    #[test]
    fn cadence() {
        let mut store = PseudoLabelStore::new(50, 5).unwrap();
        assert!(store.due_for_refresh(0));
        let model = ModelBundle::new(Architecture::mlp(2, &[4], 3), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.refresh(&model, &target(), 20, 0.85, &mut rng, 0).unwrap();
        assert!(!store.due_for_refresh(49));
        assert!(store.due_for_refresh(50));
        assert!(store.due_for_resample(0));
        assert!(!store.due_for_resample(4));
        assert!(store.due_for_resample(5));
    }

    #[test]
    fn rate_zero_records_match_prediction() {
        let model = ModelBundle::new(Architecture::mlp(2, &[4], 3), 1).unwrap();
        let mut store = PseudoLabelStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.refresh(&model, &target(), 5, 0.0, &mut rng, 0).unwrap();
        assert_eq!(store.len(), 2);
        for (id, r) in store.records.iter().enumerate() {
            assert_eq!(r.p_tilde, r.p);
            let direct = predict(&model, target().inputs.row(id).as_slice().unwrap()).unwrap();
            assert_eq!(r.p_hat, direct.p_hat);
        }
        let first = store.clone();
        store.refresh(&model, &target(), 5, 0.0, &mut rng, 1).unwrap();
        assert_eq!(first.records, store.records);
    }

    #[test]
    fn empty_target_rejected() {
        let model = ModelBundle::new(Architecture::mlp(2, &[4], 3), 1).unwrap();
        let empty = UnlabeledDataset {
            inputs: ndarray::Array2::zeros((0, 2)),
            class_names: vec!["a".into()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            PseudoLabelStore::default().refresh(&model, &empty, 5, 0.5, &mut rng, 0),
            Err(UfalError::EmptyDataset)
        ));
    }

    #[test]
    fn subset_refresh_requires_full_store() {
        let model = ModelBundle::new(Architecture::mlp(2, &[4], 3), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = PseudoLabelStore::default();
        assert!(store.refresh_subset(&model, &target(), &[0], 5, 0.0, &mut rng, 0).is_err());
        store.refresh(&model, &target(), 5, 0.0, &mut rng, 0).unwrap();
        let before = store.records.clone();
        store.refresh_subset(&model, &target(), &[1], 5, 0.0, &mut rng, 7).unwrap();
        assert_eq!(store.records, before);
        assert_eq!(store.last_refresh_step, Some(7));
    }

    #[test]
    fn zero_periods_rejected() {
        assert!(PseudoLabelStore::new(0, 5).is_err());
        assert!(PseudoLabelStore::new(5, 0).is_err());
    }
}
