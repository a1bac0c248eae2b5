//! Progressive Separate Training: each step builds an entry matrix from the
//! previous step's best encoder and trains a fresh copy of the base model on it.

use serde::{Deserialize, Serialize};

use super::{
    grid_search_with_source, multi_seed, train_one_epoch, EncodingCombination, GridSearchResult,
    SeedSummary, SentencePooling, TrainConfig,
};
use crate::dictionary::DictionaryDataset;
use crate::encoder::EncoderParams;
use crate::entry_embed::{build_entry_matrix, EntryEmbeddingMatrix};
use crate::error::{Error, Result};
use crate::eval::{sts_evaluate, EvalResult, StsSet};
use crate::geometry::{anisotropy_report, GeometryReport, IcaConfig};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::tensor::AdamWConfig;
use crate::tokenizer::Tokenizer;

/// Dev sets drive every selection; test sets are only reported.
#[derive(Clone, Debug)]
pub struct StsEvaluator {
    pub tokenizer: Tokenizer,
    pub dev: Vec<StsSet>,
    pub test: Vec<StsSet>,
}

impl StsEvaluator {
    pub fn dev<T: Scalar>(&self, encoder: &EncoderParams<T>, pooling: SentencePooling) -> Result<EvalResult> {
        sts_evaluate(encoder, &self.tokenizer, &pooling.strategy(), &self.dev)
    }

    pub fn test<T: Scalar>(&self, encoder: &EncoderParams<T>, pooling: SentencePooling) -> Result<EvalResult> {
        sts_evaluate(encoder, &self.tokenizer, &pooling.strategy(), &self.test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalBranch {
    QuasiIsotropic,
    IcaTransformed,
}

impl FinalBranch {
    pub fn name(self) -> &'static str {
        match self {
            FinalBranch::QuasiIsotropic => "quasi_isotropic",
            FinalBranch::IcaTransformed => "ica_transformed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PstPlan {
    /// One learning rate per step; the length is the number of steps.
    pub learning_rates: Vec<f64>,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Fixed combination; `None` runs a grid search at step 1.
    pub combination: Option<EncodingCombination>,
    /// Repeat the grid search at step 2.
    pub research_at_step2: bool,
    /// At the final step, also train against the ICA-transformed matrix.
    pub compare_branches: bool,
    /// The base model was itself trained from a checkpoint (at most two steps).
    pub from_checkpoint: bool,
    pub ica: IcaConfig,
    pub optimizer: AdamWConfig,
}

impl Default for PstPlan {
    fn default() -> Self {
        Self {
            learning_rates: vec![5e-3, 4e-3, 3e-3],
            batch_size: 16,
            seeds: vec![0, 1, 2, 3, 4],
            combination: None,
            research_at_step2: false,
            compare_branches: true,
            from_checkpoint: false,
            ica: IcaConfig::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl PstPlan {
    pub fn total_steps(&self) -> usize {
        self.learning_rates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let limit = if self.from_checkpoint { 2 } else { 3 };
        let steps = self.total_steps();
        if steps == 0 || steps > limit {
            return Err(Error::InvalidPlan(format!(
                "plan has {steps} steps; allowed 1..={limit}{}",
                if self.from_checkpoint { " when starting from a checkpoint" } else { "" }
            )));
        }
        if let Some(lr) = self.learning_rates.iter().find(|lr| !(**lr >= 0.0) || !lr.is_finite()) {
            return Err(Error::InvalidPlan(format!("bad learning rate {lr}")));
        }
        if let Some(w) = self.learning_rates.windows(2).find(|w| w[1] > w[0]) {
            return Err(Error::InvalidPlan(format!(
                "learning rates must not increase between steps ({} -> {})",
                w[0], w[1]
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidPlan("at least one seed is required".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::InvalidPlan("seeds must be distinct".into()));
        }
        self.ica.validate().map_err(|e| Error::InvalidPlan(e.to_string()))?;
        self.train_config(0, 0).validate().map_err(|e| Error::InvalidPlan(e.to_string()))
    }

    fn train_config(&self, step: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rates.get(step).copied().unwrap_or(0.0),
            batch_size: self.batch_size,
            seed: derive_seed(seed, "pair-order", step as u64),
            epochs: 1,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub init_fingerprint: String,
    pub trained_fingerprint: String,
    pub optimizer_steps: usize,
    pub loss_first: f64,
    pub loss_last: f64,
    pub loss_mean: f64,
    pub dev: EvalResult,
    pub test: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub branch: FinalBranch,
    pub matrix_tag: String,
    pub matrix_fingerprint: String,
    pub geometry: GeometryReport,
    pub ica_converged: Option<bool>,
    pub ica_iterations: Option<usize>,
    pub seeds: Vec<SeedRecord>,
    pub dev_summary: SeedSummary,
    pub test_summary: SeedSummary,
}

impl BranchRecord {
    fn best(&self) -> &SeedRecord {
        &self.seeds[self.dev_summary.best_index]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step number.
    pub step: usize,
    pub learning_rate: f64,
    pub combination: EncodingCombination,
    pub grid_search: Option<GridSearchResult>,
    /// Encoder the step's entry matrix was built from.
    pub source_encoder_fingerprint: String,
    pub branches: Vec<BranchRecord>,
    pub selected_branch: FinalBranch,
    pub best_seed: u64,
    pub best_encoder_fingerprint: String,
    pub best_dev_average: f64,
    pub best_test: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub pooling: SentencePooling,
    pub dev: EvalResult,
    pub test: EvalResult,
}

#[derive(Clone, Debug)]
pub struct PstState<T> {
    pub plan: PstPlan,
    pub base_fingerprint: String,
    /// The untrained base encoder under CLS and Mean pooling.
    pub baseline: Vec<BaselineRecord>,
    pub steps: Vec<StepRecord>,
    /// Entry matrices per step, one per branch, in branch-record order.
    pub matrices: Vec<Vec<EntryEmbeddingMatrix>>,
    /// Best-seed encoder of each step's selected branch.
    pub best_encoders: Vec<EncoderParams<T>>,
}

impl<T> PstState<T> {
    pub fn final_step(&self) -> &StepRecord {
        self.steps.last().expect("a completed run has at least one step")
    }
}

fn seed_run<T: Scalar>(
    base: &EncoderParams<T>,
    matrix: &EntryEmbeddingMatrix,
    dataset: &DictionaryDataset,
    combination: EncodingCombination,
    config: &TrainConfig,
    evaluator: &StsEvaluator,
    seed: u64,
) -> Result<(f64, (SeedRecord, EncoderParams<T>))> {
    let init = base.clone();
    let init_fingerprint = init.fingerprint();
    let out = train_one_epoch(&init, &evaluator.tokenizer, matrix, dataset, combination, config)?;
    let dev = evaluator.dev(&out.params, combination.sentence_pooling)?;
    let test = evaluator.test(&out.params, combination.sentence_pooling)?;
    let record = SeedRecord {
        seed,
        init_fingerprint,
        trained_fingerprint: out.params.fingerprint(),
        optimizer_steps: out.losses.len(),
        loss_first: out.losses.first().copied().unwrap_or(f64::NAN),
        loss_last: out.losses.last().copied().unwrap_or(f64::NAN),
        loss_mean: out.losses.iter().sum::<f64>() / out.losses.len().max(1) as f64,
        dev,
        test,
    };
    Ok((record.dev.average, (record, out.params)))
}

/// Run the plan. Invalid plans are rejected before any computation.
pub fn pst_run<T: Scalar>(
    plan: &PstPlan,
    base: &EncoderParams<T>,
    dataset: &DictionaryDataset,
    evaluator: &StsEvaluator,
) -> Result<PstState<T>> {
    plan.validate()?;
    let tokenizer = &evaluator.tokenizer;
    let base_fingerprint = base.fingerprint();
    let baseline = [SentencePooling::Cls, SentencePooling::Mean]
        .into_iter()
        .map(|p| {
            Ok(BaselineRecord {
                pooling: p,
                dev: evaluator.dev(base, p)?,
                test: evaluator.test(base, p)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut state = PstState {
        plan: plan.clone(),
        base_fingerprint,
        baseline,
        steps: Vec::new(),
        matrices: Vec::new(),
        best_encoders: Vec::new(),
    };
    let mut combination = plan.combination;
    let mut source = base.clone();

    for step in 0..plan.total_steps() {
        let search_seed_config = plan.train_config(step, plan.seeds[0]);
        let dev_score = |enc: &EncoderParams<T>, p: SentencePooling| Ok(evaluator.dev(enc, p)?.average);
        let grid_search = if combination.is_none() || (step == 1 && plan.research_at_step2) {
            let g = grid_search_with_source(base, &source, tokenizer, dataset, &search_seed_config, dev_score)?;
            log::info!("step {}: grid search picked {}", step + 1, g.best);
            combination = Some(g.best);
            Some(g)
        } else {
            None
        };
        let combo = combination.expect("set above");

        let (quasi, _) = build_entry_matrix(&source, tokenizer, dataset, combo.entry_type)?;
        let mut candidates = vec![(FinalBranch::QuasiIsotropic, quasi.clone(), None)];
        if step + 1 == plan.total_steps() && plan.compare_branches {
            let (ica, outcome) = quasi.ica_transformed(&plan.ica)?;
            candidates.push((FinalBranch::IcaTransformed, ica, Some(outcome)));
        }

        let mut branches = Vec::new();
        let mut trained = Vec::new();
        let mut matrices = Vec::new();
        for (branch, matrix, outcome) in candidates {
            let geometry = anisotropy_report(matrix.weights(), derive_seed(plan.seeds[0], "geometry", step as u64))?;
            let (summary, runs) = multi_seed(&plan.seeds, |seed| {
                let cfg = plan.train_config(step, seed);
                seed_run(base, &matrix, dataset, combo, &cfg, evaluator, seed)
            })?;
            let (records, encoders): (Vec<SeedRecord>, Vec<EncoderParams<T>>) = runs.into_iter().unzip();
            let test_scores: Vec<f64> = records.iter().map(|r| r.test.average).collect();
            let record = BranchRecord {
                branch,
                matrix_tag: matrix.builder_tag().to_string(),
                matrix_fingerprint: matrix.fingerprint(),
                geometry,
                ica_converged: outcome.as_ref().map(|o| o.converged),
                ica_iterations: outcome.as_ref().map(|o| o.iterations),
                test_summary: SeedSummary::from_scores(&plan.seeds, &test_scores)?,
                dev_summary: summary,
                seeds: records,
            };
            let best = record.dev_summary.best_index;
            trained.push(encoders.into_iter().nth(best).expect("one encoder per seed"));
            branches.push(record);
            matrices.push(matrix);
        }

        // ties keep the quasi-isotropic branch
        let selected = (0..branches.len())
            .max_by(|&a, &b| {
                let (sa, sb) = (branches[a].best().dev.average, branches[b].best().dev.average);
                sa.total_cmp(&sb).then(b.cmp(&a))
            })
            .expect("at least one branch");
        let chosen = &branches[selected];
        let best_encoder = trained.swap_remove(selected);
        let step_record = StepRecord {
            step: step + 1,
            learning_rate: plan.learning_rates[step],
            combination: combo,
            grid_search,
            source_encoder_fingerprint: source.fingerprint(),
            selected_branch: chosen.branch,
            best_seed: chosen.best().seed,
            best_encoder_fingerprint: best_encoder.fingerprint(),
            best_dev_average: chosen.best().dev.average,
            best_test: chosen.best().test.clone(),
            branches,
        };
        log::info!(
            "step {}: {} branch, best seed {} dev {:.2} test {:.2}",
            step_record.step,
            step_record.selected_branch.name(),
            step_record.best_seed,
            step_record.best_dev_average,
            step_record.best_test.average
        );
        state.steps.push(step_record);
        state.matrices.push(matrices);
        source = best_encoder.clone();
        state.best_encoders.push(best_encoder);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, ModelFamily};
    use crate::entry_embed::EntryPooling;
    use crate::eval::{SyntheticConfig, SyntheticWorld};

    #[test]
    fn plan_validation() {
        assert!(PstPlan::default().validate().is_ok());
        let bad = |p: PstPlan| matches!(p.validate(), Err(Error::InvalidPlan(_)));
        assert!(bad(PstPlan { learning_rates: vec![], ..Default::default() }));
        assert!(bad(PstPlan { learning_rates: vec![1e-4; 4], ..Default::default() }));
        assert!(bad(PstPlan { learning_rates: vec![3e-4, 4e-4], ..Default::default() }));
        assert!(bad(PstPlan { from_checkpoint: true, ..Default::default() }));
        assert!(PstPlan { from_checkpoint: true, learning_rates: vec![5e-4, 5e-4], ..Default::default() }
            .validate()
            .is_ok());
        assert!(bad(PstPlan { seeds: vec![1, 1], ..Default::default() }));
        assert!(bad(PstPlan { seeds: vec![], ..Default::default() }));
        assert!(bad(PstPlan { batch_size: 8, ..Default::default() }));
    }

    fn toy() -> (EncoderParams<f32>, DictionaryDataset, StsEvaluator) {
        let world = SyntheticWorld::generate(SyntheticConfig {
            n_entries: 32,
            vocab_size: 200,
            n_dev_pairs: 20,
            n_test_pairs: 20,
            ..Default::default()
        })
        .unwrap();
        let tokenizer = world.tokenizer();
        let cfg = EncoderConfig {
            vocab_size: tokenizer.len(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_position: 16,
            model_family: ModelFamily::BertLike,
            ..Default::default()
        };
        let evaluator = StsEvaluator {
            tokenizer,
            dev: vec![("dev".into(), world.dev.clone())],
            test: vec![("test".into(), world.test.clone())],
        };
        (EncoderParams::init(cfg, 3).unwrap(), world.dictionary, evaluator)
    }

    #[test]
    fn single_step_plan() {
        let (base, ds, ev) = toy();
        let plan = PstPlan {
            learning_rates: vec![5e-4],
            seeds: vec![1, 2],
            combination: Some(EncodingCombination::new(SentencePooling::Mean, EntryPooling::Amp)),
            compare_branches: false,
            ..Default::default()
        };
        let state = pst_run(&plan, &base, &ds, &ev).unwrap();
        assert_eq!(state.steps.len(), 1);
        let step = &state.steps[0];
        assert_eq!(step.branches.len(), 1);
        assert_eq!(step.branches[0].seeds.len(), 2);
        assert_eq!(step.source_encoder_fingerprint, base.fingerprint());
        assert_eq!(state.matrices[0][0].source_encoder_fingerprint(), base.fingerprint());
    }

    #[test]
    fn three_step_plan_structure() {
        let (base, ds, ev) = toy();
        let plan = PstPlan {
            seeds: vec![5, 6],
            combination: Some(EncodingCombination::new(SentencePooling::Cls, EntryPooling::Amp)),
            ..Default::default()
        };
        let state = pst_run(&plan, &base, &ds, &ev).unwrap();
        assert_eq!(state.steps.len(), 3);
        let base_fp = base.fingerprint();
        for (t, step) in state.steps.iter().enumerate() {
            for b in &step.branches {
                assert!(b.seeds.iter().all(|s| s.init_fingerprint == base_fp));
            }
            if t > 0 {
                assert_eq!(step.source_encoder_fingerprint, state.steps[t - 1].best_encoder_fingerprint);
                assert_ne!(step.source_encoder_fingerprint, base_fp);
            }
            for m in &state.matrices[t] {
                assert_eq!(m.source_encoder_fingerprint(), step.source_encoder_fingerprint);
            }
        }
        let last = state.final_step();
        let names: Vec<_> = last.branches.iter().map(|b| b.branch).collect();
        assert_eq!(names, vec![FinalBranch::QuasiIsotropic, FinalBranch::IcaTransformed]);
        assert_eq!(last.branches[1].matrix_tag, "ICA(AMP)");
        assert!(state.steps.windows(2).all(|w| w[1].learning_rate <= w[0].learning_rate));
        let fps: std::collections::HashSet<_> =
            state.matrices.iter().map(|m| m[0].fingerprint()).collect();
        assert_eq!(fps.len(), 3);
    }
}
