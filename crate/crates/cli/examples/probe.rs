use melsynth::audio::read_wav;
use melsynth::codec::{load_codec, MelAnalyzer};
use melsynth::dataset::{build_toy_bank, read_manifest, render_clip};
use melsynth::eval::{clap_score, match_notes, transcribe_pcm, NoteMatchConfig};
use melsynth::midi_tok::{read_midi_file, tokenize, MidiVocab};
use melsynth::model::load_checkpoint;
use melsynth::pipeline::synthesize_clip;
use melsynth::sampler::{GuidanceConfig, GuidanceMode, SamplerConfig};
use melsynth::timbre::SpectralFeaturizer;
use std::path::Path;

fn main() {
    let dir = Path::new("/tmp/e2e");
    let data = dir.join("data");
    let codec = load_codec(&dir.join("ckpts/codec.bin")).unwrap();
    let analyzer = MelAnalyzer::new(codec.spec).unwrap();
    let featurizer = SpectralFeaturizer::new(64, 16000).unwrap();
    let vocab = MidiVocab::standard();
    let manifest = read_manifest(&data.join("manifest.jsonl")).unwrap();
    let cond = load_checkpoint(&dir.join("ckpts/cond.ckpt")).unwrap();
    let transcriber = load_checkpoint(&dir.join("ckpts/transcribe.ckpt")).unwrap();
    let bank = build_toy_bank(4, 1, 16000).unwrap();
    let match_cfg = NoteMatchConfig::default();

    let trials: Vec<_> = manifest.iter().filter(|r| r.split == "train").take(16).collect();
    let mut f_sum = 0.0;
    let mut clap_wins = 0;
    for (i, row) in trials.iter().enumerate() {
        let ref_pcm = read_wav(&data.join(&row.ref_wav)).unwrap();
        let ref_emb = featurizer.embed_audio(&ref_pcm).unwrap();
        let notes = read_midi_file(&data.join(&row.midi)).unwrap();
        let midi = tokenize(&notes, &vocab);
        let sampler = SamplerConfig { top_p: 0.95, temperature: 1.0, seed: 9000 + i as u64, max_frames: usize::MAX };
        let (pcm, _tokens, _) = synthesize_clip(
            &cond, None, &analyzer, &codec, &ref_emb, &midi, &sampler,
            &GuidanceConfig { gamma: 1.0, mode: GuidanceMode::None },
        ).unwrap();
        // F via transcription of the synthesized audio
        let est = transcribe_pcm(&transcriber, &analyzer, &codec, &pcm).unwrap();
        let (_, _, f) = match_notes(&notes, &est.notes, &match_cfg);
        // clap comparison: same notes rendered by another instrument
        let synth_emb = featurizer.embed_audio(&pcm).unwrap();
        let other = render_clip(&bank, (row.instrument + 1) % 4, &notes).unwrap();
        let other_emb = featurizer.embed_audio(&other).unwrap();
        let same = clap_score(&ref_emb, &synth_emb).unwrap();
        let cross = clap_score(&ref_emb, &other_emb).unwrap();
        if same > cross { clap_wins += 1; }
        f_sum += f;
        println!("trial {i:2} id {:3} instr {}: F={f:.3} clap {same:.3} vs {cross:.3} {}", row.id, row.instrument, if same > cross { "WIN" } else { "LOSS" });
    }
    println!("mean F = {:.4}  clap wins {}/16", f_sum / 16.0, clap_wins);
}
