//! Property tests for the module invariants.

use melsynth::codec::{delay_apply, delay_undo, AudioTokens};
use melsynth::midi_tok::{
    detokenize, quantize_note, tokenize, velocity_bucket, MidiVocab, NoteEvent, NoteSequence,
};
use melsynth::sampler::top_p_filter;
use melsynth::timbre::{interpolate, EmbeddingSource, TimbreEmbedding};
use proptest::prelude::*;

fn note_strategy() -> impl Strategy<Value = NoteEvent> {
    (0u16..499, 1u16..120, 0u8..128, 0u8..4).prop_map(|(onset, dur, pitch, vel)| {
        NoteEvent::new(onset, (onset + dur).min(499).max(onset + 1), pitch, vel).unwrap()
    })
}

fn sequence_strategy() -> impl Strategy<Value = NoteSequence> {
    proptest::collection::vec(note_strategy(), 0..30).prop_map(NoteSequence::new_dedup)
}

proptest! {
    #[test]
    fn tokenize_roundtrips_and_is_4n(seq in sequence_strategy()) {
        let vocab = MidiVocab::standard();
        let toks = tokenize(&seq, &vocab);
        prop_assert_eq!(toks.m(), 4 * seq.len());
        // every id falls in exactly one span
        for &id in &toks.tokens {
            vocab.kind(id).unwrap();
        }
        // onset ids non-decreasing
        let onsets: Vec<u32> = toks.tokens.iter().step_by(4).copied().collect();
        prop_assert!(onsets.windows(2).all(|w| w[0] <= w[1]));
        let back = detokenize(&toks, &vocab).unwrap();
        prop_assert_eq!(back, seq);
    }

    #[test]
    fn quantize_note_respects_grid_and_ranges(
        onset in 0.0f64..4.9,
        dur in 0.0001f64..2.0,
        pitch in 0u8..128,
        vel in 0u8..128,
    ) {
        let offset = (onset + dur).min(5.0);
        let n = quantize_note(onset, offset, pitch, vel).unwrap();
        prop_assert!(n.onset_ticks < n.offset_ticks);
        prop_assert!(n.offset_ticks <= 499);
        prop_assert_eq!(n.pitch, pitch);
        prop_assert_eq!(n.velocity_bucket, velocity_bucket(vel));
        // round-to-nearest stays within half a tick
        prop_assert!((n.onset_ticks as f64 * 0.010 - onset).abs() <= 0.005 + 1e-9);
    }

    #[test]
    fn velocity_bucket_is_monotone(a in 1u8..128, b in 1u8..128) {
        if a <= b {
            prop_assert!(velocity_bucket(a) <= velocity_bucket(b));
        }
    }

    #[test]
    fn delay_roundtrip_any_shape(
        n in 1usize..24,
        d in 1usize..9,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid: Vec<Vec<u16>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(0..1000u16)).collect())
            .collect();
        let aligned = AudioTokens::aligned(grid, d).unwrap();
        let delayed = delay_apply(&aligned).unwrap();
        prop_assert_eq!(delayed.num_rows(), n + d - 1);
        prop_assert_eq!(delay_undo(&delayed).unwrap(), aligned);
    }

    #[test]
    fn interpolation_is_affine(
        alpha in -2.0f64..3.0,
        a in proptest::collection::vec(-1.0f64..1.0, 8),
        t in proptest::collection::vec(-1.0f64..1.0, 8),
    ) {
        let ea = TimbreEmbedding { vector: a.clone(), source: EmbeddingSource::Audio };
        let et = TimbreEmbedding { vector: t.clone(), source: EmbeddingSource::TextFile };
        let e = interpolate(&ea, &et, alpha).unwrap();
        for i in 0..8 {
            let expect = alpha * t[i] + (1.0 - alpha) * a[i];
            prop_assert!((e.vector[i] - expect).abs() < 1e-12);
        }
        // endpoints reproduce the inputs bit-exactly
        prop_assert_eq!(interpolate(&ea, &et, 0.0).unwrap().vector, a.clone());
        prop_assert_eq!(interpolate(&ea, &et, 1.0).unwrap().vector, t.clone());
        // fixed point
        let same = interpolate(&ea, &ea, alpha).unwrap();
        prop_assert_eq!(same.vector, a);
    }

    #[test]
    fn top_p_sample_stays_inside_nucleus(
        logits in proptest::collection::vec(-5.0f64..5.0, 2..24),
        p in 0.05f64..1.0,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let id = top_p_filter(&logits, p, 1.0, &mut rng).unwrap();
        // recompute the nucleus independently
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&x, &y| probs[y].partial_cmp(&probs[x]).unwrap().then(x.cmp(&y)));
        let mut kept = Vec::new();
        let mut cum = 0.0;
        for &i in &order {
            kept.push(i);
            cum += probs[i];
            if cum >= p {
                break;
            }
        }
        prop_assert!(kept.contains(&id), "sampled {} outside nucleus {:?}", id, kept);
    }
}
