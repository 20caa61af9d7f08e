use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use depscreen_core::data::{
    scrub_interviewer, segment_stream, synth_dataset, write_dataset, FeatureMatrix, Modality, PreprocessConfig,
    Speaker, SynthConfig, TranscriptTurn,
};
use depscreen_core::pipeline::preprocess;
use depscreen_core::pipeline::RawSession;
use proptest::prelude::*;

fn stream(rate: f64, rows: usize, d: usize) -> FeatureMatrix {
    let times = (0..rows).map(|i| i as f64 / rate).collect();
    let values = (0..rows * d).map(|i| (i as f64 * 0.37).sin()).collect();
    FeatureMatrix::new(
        Modality::Visual,
        rate,
        times,
        values,
        (0..d).map(|j| format!("f{j}")).collect(),
    )
    .unwrap()
}

fn turns_strategy() -> impl Strategy<Value = Vec<TranscriptTurn>> {
    prop::collection::vec((any::<bool>(), 0.5f64..40.0, 1.0f64..120.0), 0..12).prop_map(|spec| {
        let mut t = 0.0;
        spec.into_iter()
            .map(|(interviewer, gap, len)| {
                let start = t + gap;
                t = start + len;
                TranscriptTurn {
                    speaker: if interviewer {
                        Speaker::Interviewer
                    } else {
                        Speaker::Participant
                    },
                    start,
                    stop: t,
                    text: "words".into(),
                }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Scrubbing then segmenting gives the same windows as filtering each
    /// row against the participant-only timeline and windowing the result.
    #[test]
    fn scrub_then_segment_commutes(turns in turns_strategy(), rate in prop::sample::select(vec![0.5, 1.0, 2.0, 4.0])) {
        let fm = stream(rate, (900.0 * rate) as usize, 2);
        let config = PreprocessConfig { max_steps: usize::MAX, ..PreprocessConfig::default() };
        let scrubbed = scrub_interviewer(&turns).unwrap();
        let kept = fm.without_ranges(&scrubbed.excluded);
        let segments = if kept.is_empty() { vec![] } else { segment_stream(&kept, "s", None, &config).unwrap() };

        let in_interviewer = |t: f64| turns.iter().any(|u| u.speaker == Speaker::Interviewer && u.start <= t && t < u.stop);
        let rows: Vec<&[f64]> = (0..fm.len()).filter(|&i| !in_interviewer(fm.times[i])).map(|i| fm.row(i)).collect();
        let per_window = (300.0 * rate) as usize;
        let mut expected: Vec<Vec<f64>> = rows
            .chunks(per_window)
            .map(|c| c.concat())
            .collect();
        if let Some(last) = rows.chunks(per_window).last() {
            if (last.len() as f64) / rate < 30.0 {
                expected.pop();
            }
        }
        prop_assert_eq!(segments.len(), expected.len());
        for (s, e) in segments.iter().zip(&expected) {
            prop_assert_eq!(s.frames.data(), &e[..]);
        }
        // Windows tile the retained rows in order, up to the dropped tail.
        let covered: usize = segments.iter().map(|s| s.frames.rows()).sum();
        prop_assert!(rows.len() - covered < (30.0 * rate) as usize || covered == rows.len());
        for (i, s) in segments.iter().enumerate() {
            prop_assert_eq!(s.window_index, i);
        }
    }
}

#[test]
fn window_counts_at_boundaries() {
    let config = PreprocessConfig::default();
    for (secs, n) in [(600, 2), (320, 1), (330, 2)] {
        let fm = stream(30.0, secs * 30, 3);
        let segs = segment_stream(&fm, "s", None, &config).unwrap();
        assert_eq!(segs.len(), n, "{secs} s");
        assert!(segs.iter().all(|s| s.frames.rows() <= 120));
    }
}

#[test]
fn synthetic_classes_are_recoverable_from_raw_means() {
    let sessions: Vec<RawSession> = synth_dataset(&SynthConfig::default())
        .unwrap()
        .into_iter()
        .map(Into::into)
        .collect();
    // Per-session mean of participant-only visual and audio rows.
    let features: Vec<(u8, Vec<f64>)> = sessions
        .iter()
        .map(|s| {
            let p = preprocess(
                s,
                &PreprocessConfig {
                    max_steps: usize::MAX,
                    ..PreprocessConfig::default()
                },
            )
            .unwrap();
            let mut f = Vec::new();
            for segs in [&p.visual, &p.audio] {
                let d = segs[0].frames.last_dim();
                let mut acc = vec![0.0; d];
                let mut n = 0.0;
                for s in segs.iter() {
                    for r in 0..s.frames.rows() {
                        acc.iter_mut().zip(s.frames.row_slice(r)).for_each(|(a, v)| *a += v);
                        n += 1.0;
                    }
                }
                f.extend(acc.into_iter().map(|a| a / n));
            }
            (s.label.unwrap().value(), f)
        })
        .collect();
    let mut correct = 0;
    for (i, (label, f)) in features.iter().enumerate() {
        // Leave-one-out class means.
        let mut sums: BTreeMap<u8, (Vec<f64>, f64)> = BTreeMap::new();
        for (j, (l, g)) in features.iter().enumerate() {
            if i == j {
                continue;
            }
            let e = sums.entry(*l).or_insert_with(|| (vec![0.0; g.len()], 0.0));
            e.0.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            e.1 += 1.0;
        }
        let nearest = sums
            .iter()
            .map(|(l, (s, n))| {
                let d: f64 = s.iter().zip(f).map(|(a, v)| (a / n - v).powi(2)).sum();
                (d, *l)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1;
        correct += usize::from(nearest == *label);
    }
    let accuracy = correct as f64 / features.len() as f64;
    assert!(accuracy >= 0.99, "nearest-mean accuracy {accuracy}");
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synthetic_files_are_byte_identical_per_seed() {
    let config = SynthConfig {
        n_sessions: 16,
        participant_seconds: 200.0,
        seed: 7,
        ..SynthConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(a.path(), &config, &synth_dataset(&config).unwrap()).unwrap();
    write_dataset(b.path(), &config, &synth_dataset(&config).unwrap()).unwrap();
    let ta = read_tree(a.path());
    assert!(ta.len() > 16 * 4);
    assert_eq!(ta, read_tree(b.path()));

    let loaded = depscreen_core::pipeline::load_dataset_sessions(a.path()).unwrap();
    let direct: Vec<RawSession> = synth_dataset(&config).unwrap().into_iter().map(Into::into).collect();
    assert_eq!(loaded.len(), direct.len());
    for (x, y) in loaded.iter().zip(&direct) {
        assert_eq!(x.session_id, y.session_id);
        assert_eq!(x.label, y.label);
        assert_eq!(x.visual.values, y.visual.values);
        assert_eq!(x.audio.values, y.audio.values);
        assert_eq!(x.transcript, y.transcript);
        assert_eq!(x.text_embedding, y.text_embedding);
    }
}

#[test]
fn uploads_parse_like_files_on_disk() {
    let config = SynthConfig {
        n_sessions: 8,
        participant_seconds: 200.0,
        seed: 11,
        ..SynthConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let dataset = write_dataset(dir.path(), &config, &synth_dataset(&config).unwrap()).unwrap();
    let loaded = depscreen_core::pipeline::load_dataset_sessions(dir.path()).unwrap();
    let mut cache = depscreen_core::pipeline::TableCache::default();
    for (path, raw) in dataset.manifest_paths(dir.path()).iter().zip(&loaded) {
        let upload = depscreen_core::pipeline::SessionUpload::from_manifest(path, &mut cache).unwrap();
        let json = serde_json::to_string(&upload).unwrap();
        let back: depscreen_core::pipeline::SessionUpload = serde_json::from_str(&json).unwrap();
        let parsed = back.parse(dataset.visual_dim, dataset.audio_dim).unwrap();
        assert_eq!(parsed.visual, raw.visual);
        assert_eq!(parsed.audio, raw.audio);
        assert_eq!(parsed.transcript, raw.transcript);
        assert_eq!(parsed.text_embedding, raw.text_embedding);
        assert_eq!(&parsed, raw);
    }
    let mut bad =
        depscreen_core::pipeline::SessionUpload::from_manifest(&dataset.manifest_paths(dir.path())[0], &mut cache)
            .unwrap();
    bad.visual_csv = bad.visual_csv.replacen("\n0", "\nNaN", 1);
    let err = bad
        .parse(dataset.visual_dim, dataset.audio_dim)
        .unwrap_err()
        .to_string();
    assert!(err.starts_with("visual_csv:2:"), "{err}");
}
