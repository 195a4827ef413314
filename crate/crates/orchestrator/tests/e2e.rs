mod common;

use std::collections::BTreeMap;

use common::{open, Setup};
use labelkit::runner::{RunError, LEDGER};
use labelkit::state::Stage;
use labelkit::sweep::sweep_exemplars;
use labelkit_core::annotation::{Provenance, COT_STAGE, JUDGE_STAGE};
use labelkit_core::gateway::{LedgerEntry, LedgerTotals};

fn read_dir_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != ".lock" {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[tokio::test]
async fn embedding_target_persists_records_and_vectors() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, _) = Setup::default().build(tmp.path());
    let mut orch = open(&cfg);
    let state = orch.run_stage(Stage::Embedded).await.unwrap();
    assert_eq!(state.stage, Some(Stage::Embedded));
    assert_eq!(state.transitions.len(), 2);
    let stored = orch.store().load_embeddings("mock-embedding", false, None).unwrap();
    assert_eq!(stored.len(), 200);
    assert_eq!(orch.store().load_corpus().unwrap().unwrap().len(), 200);
}

#[tokio::test]
async fn gates_stop_the_run_until_a_person_acts() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, _) = Setup::default().build(tmp.path());
    let mut orch = open(&cfg);

    match orch.run_stage(Stage::CoarseDone).await {
        Err(RunError::HumanGatePending { stage, action }) => {
            assert_eq!(stage, Stage::PoolLabeled);
            assert!(action.contains("12 of 12"), "{action}");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(orch.state().unwrap().stage, Some(Stage::PoolSelected));

    // Sealing needs every item labeled.
    assert!(matches!(orch.seal_pool("alice"), Err(RunError::Conflict(_))));
    assert!(matches!(orch.label_pool_from_reference(" "), Err(RunError::Invalid(_))));
    orch.label_pool_from_reference("alice").unwrap();

    match orch.run_stage(Stage::CoarseDone).await {
        Err(RunError::HumanGatePending { stage, .. }) => assert_eq!(stage, Stage::PromptApproved),
        other => panic!("{other:?}"),
    }
    let state = orch.state().unwrap();
    assert_eq!(state.stage, Some(Stage::PromptGenerated));
    let gated: Vec<_> = state.transitions.iter().filter(|t| t.stage.requires_actor()).collect();
    assert_eq!(gated.len(), 1);
    assert_eq!(gated[0].actor.as_deref(), Some("alice"));

    // Out-of-stage human actions are refused.
    assert!(matches!(orch.override_mismatch("s0000", "politics", "bob"), Err(RunError::Conflict(_))));
    assert!(matches!(orch.label_pool_item("s0000", "politics", "bob", None), Err(RunError::Conflict(_))));
}

#[tokio::test]
async fn full_run_reaches_finalized_with_a_complete_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, synth) = Setup::default().build(tmp.path());
    let mut orch = open(&cfg);
    orch.run_stage(Stage::PoolSelected).await.unwrap();
    orch.label_pool_from_reference("alice").unwrap();
    orch.run_stage(Stage::PromptGenerated).await.unwrap();
    let version = orch.prompt().unwrap().version;
    orch.edit_prompt(
        &labelkit::runner::PromptEditRequest {
            class: Some("business".into()),
            text: "Choose <business> for markets, companies and earnings.".into(),
            expected_version: Some(version),
        },
        "alice",
    )
    .unwrap();
    assert!(matches!(orch.approve_prompt("alice", Some(version)), Err(RunError::Conflict(_))));
    orch.approve_prompt("alice", Some(version + 1)).unwrap();
    orch.run_stage(Stage::ConsensusDone).await.unwrap();

    let open_ids = orch.open_mismatches().unwrap();
    if !open_ids.is_empty() {
        assert!(matches!(
            orch.run_stage(Stage::Finalized).await,
            Err(RunError::HumanGatePending { stage: Stage::Finalized, .. })
        ));
    }
    assert!(matches!(orch.override_mismatch("nope", "politics", "bob"), Err(RunError::NotFound(_))));
    let mismatches = orch.mismatches().unwrap();
    let first = &mismatches[0].record.record_id;
    assert!(matches!(orch.override_mismatch(first, "sports", "bob"), Err(RunError::Invalid(_))));
    for id in open_ids.iter().chain(std::iter::once(first)) {
        orch.override_mismatch(id, &synth.truth[id], "bob").unwrap();
    }
    let state = orch.run_stage(Stage::Finalized).await.unwrap();
    assert_eq!(state.transitions.last().unwrap().actor.as_deref(), Some("bob"));

    let labeling = orch.final_labeling().unwrap().unwrap();
    assert_eq!(labeling.labels.len(), 200);
    let report = orch.report().unwrap().unwrap();
    assert_eq!(report.records, 200);
    assert_eq!(report.agreed + report.mismatches, 200);
    assert!(labeling.count(Provenance::Human) >= 1);
    assert_eq!(labeling.get(first).unwrap().provenance, Provenance::Human);
    let final_f1 = report.final_metrics.as_ref().unwrap().macro_f1;
    let coarse_f1 = report.annotator_a_metrics.as_ref().unwrap().macro_f1;
    assert!(final_f1 > coarse_f1, "{final_f1} vs {coarse_f1}");
    assert!(orch.manifest().unwrap().is_some());

    // Ledger completeness: the persisted ledger, the run state and the
    // report agree, and consensus made three calls per mismatch.
    let entries: Vec<LedgerEntry> = orch.persisted_ledger().unwrap();
    let mut sum = LedgerTotals::default();
    for e in &entries {
        sum.add(e.input_tokens, e.output_tokens);
    }
    assert_eq!(state.ledger, sum);
    assert_eq!(sum, orch.session_ledger().totals());
    let by_stage_calls: u64 = report.ledger_by_stage.values().map(|t| t.calls).sum();
    assert_eq!(by_stage_calls, sum.calls);
    let stage3 = report.ledger_by_stage[COT_STAGE].calls + report.ledger_by_stage[JUDGE_STAGE].calls;
    assert_eq!(stage3, 3 * report.mismatches as u64);
    assert_eq!(report.ledger_by_stage["coarse"].calls, 400);

    // Asking again changes nothing and calls nobody.
    let before = read_dir_bytes(&cfg.run_dir);
    let mut again = open(&cfg);
    again.run_stage(Stage::Finalized).await.unwrap();
    assert_eq!(again.session_ledger().totals().calls, 0);
    assert_eq!(before, read_dir_bytes(&cfg.run_dir));
    assert!(orch.store().exists(LEDGER));
}

#[tokio::test]
async fn a_held_lock_blocks_a_second_runner() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, _) = Setup::default().build(tmp.path());
    let mut orch = open(&cfg);
    let _held = orch.store().lock().unwrap();
    assert!(matches!(orch.run_stage(Stage::Ingested).await, Err(RunError::LockHeld)));
}

#[tokio::test]
async fn sweep_matches_a_full_run_and_reports_failed_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let setup = Setup {
        n: 90,
        ..Setup::default()
    };
    let (cfg, _) = setup.build(tmp.path());

    let table = sweep_exemplars(&cfg, &[12, 6, 500]).await;
    assert_eq!(table.cells.iter().map(|c| c.m).collect::<Vec<_>>(), vec![6, 12, 500]);
    assert!(table.cells[0].metrics.is_some() && table.cells[1].metrics.is_some());
    // More exemplars than records: the cell fails, the table survives.
    assert!(table.cells[2].metrics.is_none());
    assert!(table.cells[2].error.is_some());
    assert!(table.render().contains("failed"));

    // The same pool size in an ordinary run gives annotator A the same
    // metrics as the sweep cell.
    let mut orch = open(&cfg);
    orch.run_stage(Stage::PoolSelected).await.unwrap();
    orch.label_pool_from_reference("alice").unwrap();
    orch.run_stage(Stage::PromptGenerated).await.unwrap();
    orch.approve_prompt("alice", None).unwrap();
    orch.run_stage(Stage::ConsensusDone).await.unwrap();
    for id in orch.open_mismatches().unwrap() {
        orch.override_mismatch(&id, "politics", "bob").unwrap();
    }
    orch.run_stage(Stage::Finalized).await.unwrap();
    let report = orch.report().unwrap().unwrap();
    assert_eq!(report.annotator_a_metrics.as_ref(), table.cells[1].metrics.as_ref());
}
