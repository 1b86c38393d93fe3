use std::collections::BTreeMap;

use protosplit::bundle::{load_checkpoint, save_checkpoint};
use protosplit::detect::top_activated_patches;
use protosplit::metrics::accuracy;
use protosplit::model::pooled_image_activations;
use protosplit::split::{
    build_reference_set, concepts_from_labels, default_reference_size, reinit_and_finetune_head,
    run_split, ConceptLabel, FinetuneParams, SessionStatus, SplitHyperparams, SplitSession,
};
use protosplit::synth::{generate_bank, oracle_labels, SynthConfig, Workbench};
use protosplit::{corpus_activations, patch_activations, Execution};

fn session_for(wb: &Workbench, which: usize) -> (usize, SplitSession) {
    let exec = Execution::default();
    let acts = corpus_activations(&wb.corpus, &wb.bank, exec).unwrap();
    let e = wb.truth.entangled[which].prototype;
    let top = top_activated_patches(&wb.corpus, &acts, e, 10, true).unwrap();
    let sets = oracle_labels(&wb.truth, &wb.corpus, &acts, &wb.bank, e, &top.patches).unwrap();
    let session = SplitSession::new(&wb.bank, e, sets, SplitHyperparams::default(), 2).unwrap();
    (e, session)
}

#[test]
fn oracle_split_separates_clusters_on_20_seeds() {
    for seed in 0..20 {
        let wb = generate_bank(&SynthConfig::with_seed(seed)).unwrap();
        let which = seed as usize % wb.truth.entangled.len();
        let (e, mut session) = session_for(&wb, which);
        let result = run_split(&mut session, seed).unwrap();
        assert!(result.converged, "seed {seed}");
        assert_eq!(session.status(), SessionStatus::Converged);

        // the reported accuracy is the last evaluation in the history
        let last = session.history.evaluations.last().unwrap();
        assert!(last.accuracy.all_at_least(0.999));
        assert!(result.accuracy.all_at_least(0.999), "seed {seed}: {:?}", result.accuracy);

        let truth = wb.truth.entangled_prototype(e).unwrap();
        let acts = corpus_activations(&wb.corpus, &result.bank, Execution::default()).unwrap();
        for (channel, cluster) in [
            (result.pair.original, truth.cluster_a),
            (result.pair.duplicate, truth.cluster_b),
        ] {
            let top = top_activated_patches(&wb.corpus, &acts, channel, 10, true).unwrap();
            let hits = top
                .patches
                .iter()
                .filter(|&&i| wb.truth.patch_cluster[i] == cluster)
                .count();
            assert!(hits >= 9, "seed {seed} channel {channel}: {hits}/10 from cluster {cluster}");
        }
    }
}

#[test]
fn windowed_loss_does_not_increase() {
    for seed in 0..5 {
        let wb = generate_bank(&SynthConfig::with_seed(seed)).unwrap();
        let (_, mut session) = session_for(&wb, 0);
        run_split(&mut session, seed).unwrap();
        let evals = &session.history.evaluations;
        assert!(evals.len() >= 2);
        for w in evals.windows(2) {
            assert!(
                w[1].full_loss <= w[0].full_loss,
                "seed {seed}: step {} loss {} -> step {} loss {}",
                w[0].step,
                w[0].full_loss,
                w[1].step,
                w[1].full_loss
            );
        }
    }
}

#[test]
fn reference_patches_peak_elsewhere() {
    let wb = generate_bank(&SynthConfig::with_seed(12)).unwrap();
    let acts = corpus_activations(&wb.corpus, &wb.bank, Execution::default()).unwrap();
    for ent in &wb.truth.entangled {
        let e = ent.prototype;
        let r = build_reference_set(&wb.corpus, &acts, &wb.bank, e, 40, &[]).unwrap();
        assert_eq!(r.patches.len(), 40);
        for &i in &r.patches {
            // recompute from scratch rather than trusting the cache
            let p = patch_activations(&wb.corpus.patches[i].feature, &wb.bank).unwrap();
            assert_ne!(p.top_channel(), Some(e));
        }
    }
}

#[test]
fn head_finetune_keeps_accuracy_on_20_seeds() {
    for seed in 0..20 {
        let wb = generate_bank(&SynthConfig::with_seed(seed)).unwrap();
        let exec = Execution::default();
        let before = {
            let a = corpus_activations(&wb.corpus, &wb.bank, exec).unwrap();
            accuracy(&wb.bank, &pooled_image_activations(&wb.corpus, &a).unwrap()).unwrap()
        };
        let (_, mut session) = session_for(&wb, 0);
        let result = run_split(&mut session, seed).unwrap();
        let acts = corpus_activations(&wb.corpus, &result.bank, exec).unwrap();
        let data = pooled_image_activations(&wb.corpus, &acts).unwrap();
        let rows = [result.pair.original, result.pair.duplicate];
        let (bank, init) =
            reinit_and_finetune_head(&result.bank, &rows, &data, &FinetuneParams::default(), seed)
                .unwrap();
        assert!(!init.fallback);
        for r in 0..bank.num_prototypes() {
            if !rows.contains(&r) {
                assert_eq!(bank.head().row(r), result.bank.head().row(r));
            }
        }
        let after = accuracy(&bank, &data).unwrap();
        assert!((after - before).abs() <= 0.01, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn checkpoint_round_trip_resumes_identically() {
    let wb = generate_bank(&SynthConfig::with_seed(1)).unwrap();
    let (_, session) = session_for(&wb, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.json");
    save_checkpoint(&session, &path).unwrap();
    let mut restored = load_checkpoint(&path).unwrap();
    assert_eq!(restored, session);
    let mut original = session;
    let a = run_split(&mut original, 3).unwrap();
    let b = run_split(&mut restored, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(original.history.losses, restored.history.losses);
}

#[test]
fn labels_respect_minimum_concept_size() {
    let wb = generate_bank(&SynthConfig::with_seed(6)).unwrap();
    let acts = corpus_activations(&wb.corpus, &wb.bank, Execution::default()).unwrap();
    let e = wb.truth.entangled[0].prototype;
    let top = top_activated_patches(&wb.corpus, &acts, e, 10, true).unwrap();
    let label = |n_a: usize| -> BTreeMap<usize, ConceptLabel> {
        top.patches
            .iter()
            .enumerate()
            .map(|(k, &i)| (i, if k < n_a { ConceptLabel::A } else { ConceptLabel::B }))
            .collect()
    };

    let sets = concepts_from_labels(&wb.corpus, &acts, &wb.bank, e, &label(5), 2, true).unwrap();
    assert_eq!((sets.s1.len(), sets.s2.len()), (5, 5));
    assert_eq!(sets.sr.len(), default_reference_size(5, 5));

    let err = concepts_from_labels(&wb.corpus, &acts, &wb.bank, e, &label(9), 2, true).unwrap_err();
    assert!(err.to_string().contains("concept B below minimum size"), "{err}");

    // something-else patches join the reference set only when pooled
    let mut labels = label(5);
    let extra = top.patches[9];
    labels.insert(extra, ConceptLabel::SomethingElse);
    labels.insert(top.patches[0], ConceptLabel::SomethingElse);
    let pooled = concepts_from_labels(&wb.corpus, &acts, &wb.bank, e, &labels, 2, true).unwrap();
    let key = wb.corpus.patches[extra].key();
    assert!(pooled.sr.iter().any(|p| p.key() == key));
    let unpooled = concepts_from_labels(&wb.corpus, &acts, &wb.bank, e, &labels, 2, false).unwrap();
    assert!(unpooled.sr.iter().all(|p| p.key() != key));
    assert_eq!(unpooled.s1.len(), 4);
}
