// SPDX-License-Identifier: Apache-2.0

mod common;

use std::fs;
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};
use spkt_core::data::{build_windows, load_dataset, split, synth_generate, write_dataset, Dataset, Manifest};
use spkt_core::{Error, SplitSpec, SynthSpec, Tensor, TrialRecord};

fn fixture(dir: &Path, channels: usize, n: usize) -> Dataset {
    let trials = (0..2)
        .map(|i| TrialRecord {
            trial_id: format!("t{i}"),
            subject_id: Some(i),
            samples: Tensor::new(&[channels, n], (0..channels * n).map(|v| v as f32).collect()).unwrap(),
            sample_rate: 128.0,
        })
        .collect();
    let ds = Dataset {
        manifest: Manifest {
            format_version: 1,
            sample_rate_hz: 128.0,
            channels,
            subjects: vec![0, 1],
        },
        trials,
    };
    write_dataset(dir, &ds).unwrap();
    ds
}

#[test]
fn two_trial_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = fixture(dir.path(), 3, 40);
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.trials[1].samples.shape(), &[3, 40]);
    let via_manifest = load_dataset(dir.path().join("manifest.json")).unwrap();
    assert_eq!(via_manifest, ds);
}

#[test]
fn truncated_binary_names_trial_and_byte_counts() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 3, 40);
    let f = dir.path().join("trials/t1.f32");
    let bytes = fs::read(&f).unwrap();
    fs::write(&f, &bytes[..bytes.len() - 6]).unwrap();
    match load_dataset(dir.path()).unwrap_err() {
        Error::Load { trial, reason } => {
            assert_eq!(trial, "t1");
            assert!(reason.contains("expected 480 bytes") && reason.contains("found 474"), "{reason}");
        }
        e => panic!("unexpected error {e}"),
    }
}

#[test]
fn channel_count_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 30, 16);
    let mpath = dir.path().join("manifest.json");
    let text = fs::read_to_string(&mpath).unwrap().replace("\"channels\": 30", "\"channels\": 32");
    fs::write(&mpath, text).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("implies 30 channels"), "{err}");
}

#[test]
fn non_finite_and_missing_files_are_load_errors() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 2, 8);
    let f = dir.path().join("trials/t0.f32");
    let mut bytes = fs::read(&f).unwrap();
    bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&f, bytes).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(&err, Error::Load { trial, reason } if trial == "t0" && reason.contains("non-finite")), "{err}");

    fs::remove_file(&f).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(&err, Error::Load { trial, .. } if trial == "t0"), "{err}");
}

#[test]
fn unlabeled_trials_load_but_stay_out_of_splits() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = fixture(dir.path(), 1, 16);
    ds.trials.push(TrialRecord {
        trial_id: "probe".into(),
        subject_id: None,
        samples: Tensor::zeros(&[1, 16]),
        sample_rate: 128.0,
    });
    ds.trials.push(TrialRecord {
        trial_id: "t2".into(),
        subject_id: Some(0),
        ..ds.trials[0].clone()
    });
    ds.trials.push(TrialRecord {
        trial_id: "t3".into(),
        subject_id: Some(1),
        ..ds.trials[1].clone()
    });
    write_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.unlabeled().count(), 1);
    let (tr, va) = split(&back.trials, &SplitSpec::default()).unwrap();
    assert!(!tr.contains(&2) && !va.contains(&2));
    assert_eq!(tr.len() + va.len(), 4);
}

#[test]
fn lone_subject_blocks_stratified_split() {
    let spec = SynthSpec {
        n_subjects: 3,
        trials_per_subject: 2,
        duration_s: 1.0,
        channels: 2,
        ..Default::default()
    };
    let mut ds = synth_generate(&spec).unwrap();
    ds.trials.retain(|t| t.trial_id != "s02_t01");
    let err = split(&ds.trials, &SplitSpec::default()).unwrap_err().to_string();
    assert!(err.contains("[2]"), "{err}");
}

#[test]
fn challenge_sized_split_keeps_one_trial_per_subject() {
    let spec = SynthSpec {
        channels: 1,
        duration_s: 90.0,
        ..Default::default()
    };
    let ds = synth_generate(&spec).unwrap();
    assert_eq!(ds.trials.len(), 26 * 12);
    let (tr, va) = split(&ds.trials, &SplitSpec::default()).unwrap();
    assert_eq!(va.len(), 26);
    let train: Vec<&TrialRecord> = tr.iter().map(|&i| &ds.trials[i]).collect();
    let set = build_windows(&train, 1280, 1280, true).unwrap();
    for s in 0..26 {
        let n = set.labels.iter().filter(|&&l| l == s).count();
        assert!(n >= 25, "subject {s} has {n} training windows");
    }
    let again = split(&ds.trials, &SplitSpec::default()).unwrap();
    assert_eq!(again, (tr, va));
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64 - ma, y as f64 - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn noiseless_trials_of_one_subject_correlate() {
    let spec = SynthSpec {
        n_subjects: 2,
        trials_per_subject: 2,
        channels: 4,
        duration_s: 20.0,
        snr_db: f64::INFINITY,
        ..Default::default()
    };
    let ds = synth_generate(&spec).unwrap();
    let (a, b) = (&ds.trials[0], &ds.trials[1]);
    assert_eq!(a.subject_id, b.subject_id);
    let n = a.n_samples();
    for ch in 0..4 {
        let r = pearson(&a.samples.data()[ch * n..(ch + 1) * n], &b.samples.data()[ch * n..(ch + 1) * n]);
        assert!(r > 0.99, "channel {ch}: r = {r}");
    }
}

#[test]
fn generation_is_bit_identical_per_seed() {
    let spec = SynthSpec {
        n_subjects: 3,
        trials_per_subject: 2,
        channels: 4,
        duration_s: 5.0,
        ..Default::default()
    };
    let a = synth_generate(&spec).unwrap();
    let b = synth_generate(&spec).unwrap();
    assert_eq!(a, b);
    let c = synth_generate(&SynthSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a.trials[0].samples, c.trials[0].samples);

    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(d1.path(), &a).unwrap();
    write_dataset(d2.path(), &b).unwrap();
    for f in ["manifest.json", "trials.csv", "trials/s01_t01.f32"] {
        assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
}

/// Mean magnitude spectrum of every channel of a window, concatenated.
fn spectrum(window: &[f32], channels: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = window.len() / channels;
    let fft = planner.plan_fft_forward(n);
    let mut out = vec![0.0; n / 2];
    for ch in window.chunks(n) {
        let mut buf: Vec<Complex<f64>> = ch.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        fft.process(&mut buf);
        for (o, c) in out.iter_mut().zip(&buf[..n / 2]) {
            *o += c.norm() / channels as f64;
        }
    }
    out
}

#[test]
fn subjects_are_separable_by_spectrum() {
    let spec = SynthSpec {
        n_subjects: 8,
        trials_per_subject: 6,
        channels: 8,
        ..Default::default()
    };
    let ds = synth_generate(&spec).unwrap();
    let (tr, va) = split(&ds.trials, &SplitSpec::default()).unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.trials[i]).collect::<Vec<_>>();
    let train = build_windows(&pick(&tr), 1280, 1280, true).unwrap();
    let val = build_windows(&pick(&va), 1280, 1280, true).unwrap();
    let mut planner = FftPlanner::new();
    let mut centroids = vec![vec![0.0; 640]; 8];
    let mut counts = [0usize; 8];
    for i in 0..train.len() {
        let s = spectrum(train.row(i), 8, &mut planner);
        let l = train.labels[i];
        centroids[l].iter_mut().zip(&s).for_each(|(c, v)| *c += v);
        counts[l] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = (0..val.len())
        .filter(|&i| {
            let s = spectrum(val.row(i), 8, &mut planner);
            let dist = |c: &Vec<f64>| c.iter().zip(&s).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..8).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == val.labels[i]
        })
        .count();
    let acc = correct as f64 / val.len() as f64;
    assert!(acc >= 0.95, "spectral nearest-centroid accuracy {acc}");
}
