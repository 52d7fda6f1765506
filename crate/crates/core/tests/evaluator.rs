mod common;

use std::cell::Cell;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tashr_core::evaluator::{
    evaluate_dataset, match_and_score, psnr, render_table, ssim, CachedOcr, EvalReport, ImageSource, MatchCounts,
    MatchOptions, MockOcr, OcrResult, ReportMetadata,
};
use tashr_core::imaging::{save_image, BoxRect, ImageRgb, TextAnnotation};
use tashr_core::synthgen::{generate_dataset, synthetic_page, DatasetManifest, GeneratorConfig};
use tashr_core::{Error, ErrorClass};

#[test]
fn psnr_closed_form() {
    let a = ImageRgb::filled(8, 8, [100.0 / 255.0; 3]);
    let b = ImageRgb::filled(8, 8, [116.0 / 255.0; 3]);
    let v = psnr(&a, &b, 1.0).unwrap();
    assert!((v - 20.0 * (255.0f64 / 16.0).log10()).abs() < 1e-3);
    assert!((v - 24.05).abs() < 0.01);
}

#[test]
fn ssim_matches_direct_window_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..4 {
        let a = ImageRgb::from_fn(24, 20, |_, _, _| rng.gen_range(0u8..=255) as f32 / 255.0);
        let b = ImageRgb::from_fn(24, 20, |c, y, x| (a.get(c, y, x) + rng.gen_range(-0.2f32..0.2)).clamp(0.0, 1.0));
        let fast = ssim(&a, &b).unwrap();
        let direct = common::ssim_direct(&a, &b);
        assert!((fast - direct).abs() < 1e-6, "{fast} vs {direct}");
    }
}

/// Every word an annotation may contain in the exhaustive check.
fn universe() -> Vec<(BoxRect, &'static str)> {
    // B overlaps A with IoU 70/130; C overlaps B with IoU 50/150 and misses A
    let places = [
        BoxRect::new(0.0, 0.0, 10.0, 10.0),
        BoxRect::new(3.0, 0.0, 10.0, 10.0),
        BoxRect::new(8.0, 0.0, 10.0, 10.0),
    ];
    places.iter().flat_map(|&b| [(b, "ab"), (b, "cd")]).collect()
}

fn sequences(n_items: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for i in 0..n_items {
                let mut t: Vec<usize> = s.clone();
                t.push(i);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn matching_equals_brute_force_on_small_instances() {
    let u = universe();
    let seqs = sequences(u.len(), 4);
    let options = MatchOptions::default();
    // predictions at the middle place are read in upper case with padding
    let spelled = |i: usize| if i / 2 == 1 { format!(" {} ", u[i].1.to_uppercase()) } else { u[i].1.to_string() };
    let mut checked = 0;
    for g in &seqs {
        let gt = TextAnnotation::new(g.iter().map(|&i| u[i].0).collect(), g.iter().map(|&i| u[i].1.to_string()).collect())
            .unwrap();
        for p in &seqs {
            let pred = OcrResult {
                boxes: p.iter().map(|&i| u[i].0).collect(),
                texts: p.iter().map(|&i| spelled(i)).collect(),
                confidences: vec![0.9; p.len()],
            };
            let best = common::max_matching(&common::eligible_pairs(&pred, &gt, options.iou_thresh));
            let expected = MatchCounts {
                tp: best,
                fp: p.len() - best,
                fn_: g.len() - best,
            };
            assert_eq!(match_and_score(&pred, &gt, &options), expected, "pred {p:?} gt {g:?}");
            checked += 1;
        }
    }
    assert_eq!(checked, 1555 * 1555);
}

fn small_dataset(dir: &Path, pages: u64) -> DatasetManifest {
    let corpus: Vec<_> = (0..pages).map(|i| synthetic_page(i, 64)).collect();
    let cfg = GeneratorConfig {
        size: 64,
        ..GeneratorConfig::default()
    };
    generate_dataset(&cfg, &corpus, dir).unwrap()
}

fn id_of(path: &Path) -> String {
    path.file_stem().unwrap().to_string_lossy().into_owned()
}

fn meta(method: &str) -> ReportMetadata {
    ReportMetadata {
        method: method.into(),
        dataset: "synthetic".into(),
        ocr_engine: "mock".into(),
    }
}

#[test]
fn perfect_pipeline_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 3);
    let outputs = dir.path().join("outputs");
    for e in &manifest.entries {
        let clean = tashr_core::imaging::load_image(manifest.resolve(&e.clean_path)).unwrap();
        save_image(&clean, outputs.join(format!("{}.png", e.id))).unwrap();
    }
    let m2 = manifest.clone();
    let ocr = MockOcr::new("oracle", move |p: &Path| {
        let id = id_of(p);
        Ok(OcrResult::from_annotation(&m2.entries.iter().find(|e| e.id == id).unwrap().annotation))
    });
    let r = evaluate_dataset(
        &manifest,
        &ImageSource::Directory(outputs),
        &ocr,
        &MatchOptions::default(),
        meta("perfect"),
    )
    .unwrap();
    let a = &r.aggregates;
    assert_eq!((a.recall, a.precision, a.f_measure), (1.0, 1.0, 1.0));
    assert_eq!(a.mean_psnr, 99.0);
    assert!((a.mean_ssim - 1.0).abs() < 1e-12);
    assert_eq!((a.scored, a.failed), (3, 0));

    let empty = MockOcr::new("blind", |_: &Path| Ok(OcrResult::default()));
    let r = evaluate_dataset(&manifest, &ImageSource::Highlights, &empty, &MatchOptions::default(), meta("blind"))
        .unwrap();
    assert_eq!((r.aggregates.recall, r.aggregates.precision, r.aggregates.f_measure), (0.0, 0.0, 0.0));
}

#[test]
fn hand_computed_partial_matches() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = small_dataset(dir.path(), 2);
    let word = |x: f64, t: &str| (BoxRect::new(x, 4.0, 12.0, 8.0), t.to_string());
    let anns = [
        vec![word(2.0, "ONE"), word(20.0, "TWO")],
        vec![word(2.0, "RED"), word(20.0, "BLUE"), word(40.0, "GREEN")],
    ];
    for (e, words) in manifest.entries.iter_mut().zip(&anns) {
        e.annotation = TextAnnotation::new(words.iter().map(|w| w.0).collect(), words.iter().map(|w| w.1.clone()).collect())
            .unwrap();
    }
    let first = manifest.entries[0].id.clone();
    let ocr = MockOcr::new("partial", move |p: &Path| {
        let words = if id_of(p) == first {
            // one hit, one misread
            vec![word(2.0, "one"), word(20.0, "TW0")]
        } else {
            // two hits, one miss
            vec![word(3.0, "red"), word(20.0, " blue ")]
        };
        Ok(OcrResult {
            boxes: words.iter().map(|w| w.0).collect(),
            texts: words.iter().map(|w| w.1.clone()).collect(),
            confidences: vec![1.0; words.len()],
        })
    });
    let r = evaluate_dataset(&manifest, &ImageSource::Highlights, &ocr, &MatchOptions::default(), meta("partial"))
        .unwrap();
    let a = &r.aggregates;
    assert_eq!(a.counts, MatchCounts { tp: 3, fp: 1, fn_: 2 });
    assert_eq!(a.recall, 0.6);
    assert_eq!(a.precision, 0.75);
    assert!((a.f_measure - 2.0 * 0.6 * 0.75 / 1.35).abs() < 1e-15);
    assert_eq!(r.rows[0].counts, Some(MatchCounts { tp: 1, fp: 1, fn_: 1 }));
    assert_eq!(r.rows[1].recall, Some(2.0 / 3.0));

    let path = dir.path().join("report.json");
    r.save(&path).unwrap();
    assert_eq!(EvalReport::load(&path).unwrap(), r);
    let table = render_table(&[r]);
    let cells: Vec<&str> = table.lines().nth(2).unwrap().split_whitespace().collect();
    assert_eq!(&cells[..4], ["partial", "60.00", "75.00", "66.67"]);
}

#[test]
fn ocr_failures_are_excluded_and_missing_outputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 2);
    let first = manifest.entries[0].id.clone();
    let m2 = manifest.clone();
    let flaky = MockOcr::new("flaky", move |p: &Path| {
        let id = id_of(p);
        if id == first {
            return Err(Error::Ocr("engine crashed".into()));
        }
        Ok(OcrResult::from_annotation(&m2.entries.iter().find(|e| e.id == id).unwrap().annotation))
    });
    let r = evaluate_dataset(&manifest, &ImageSource::Highlights, &flaky, &MatchOptions::default(), meta("x")).unwrap();
    assert_eq!((r.aggregates.scored, r.aggregates.failed), (1, 1));
    assert_eq!(r.aggregates.recall, 1.0);
    assert!(r.rows[0].ocr_error.as_deref().unwrap().contains("engine crashed"));

    let err = evaluate_dataset(
        &manifest,
        &ImageSource::Directory(dir.path().join("nowhere")),
        &flaky,
        &MatchOptions::default(),
        meta("x"),
    )
    .unwrap_err();
    assert_eq!(err.class(), ErrorClass::Data);
}

#[test]
fn evaluation_replays_from_recorded_cache() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 3);
    let cache = dir.path().join("cache");
    let calls = Cell::new(0);
    let m2 = manifest.clone();
    let live = MockOcr::new("spotter", |p: &Path| {
        calls.set(calls.get() + 1);
        let id = id_of(p);
        let mut r = OcrResult::from_annotation(&m2.entries.iter().find(|e| e.id == id).unwrap().annotation);
        r.texts.iter_mut().skip(1).step_by(2).for_each(|t| t.push('!'));
        r.confidences.iter_mut().for_each(|c| *c = 0.123456789);
        Ok(r)
    });
    let recorded = CachedOcr::new(live, &cache);
    let first = evaluate_dataset(&manifest, &ImageSource::Highlights, &recorded, &MatchOptions::default(), meta("m"))
        .unwrap();
    assert_eq!(calls.get(), 3);
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 3);

    // same engine id, but it must never be consulted
    let dead = MockOcr::new("spotter", |_: &Path| -> tashr_core::Result<OcrResult> { panic!("cache miss") });
    let replay = CachedOcr::new(dead, &cache);
    let second = evaluate_dataset(&manifest, &ImageSource::Highlights, &replay, &MatchOptions::default(), meta("m"))
        .unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    first.save(&a).unwrap();
    second.save(&b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert!(first.aggregates.precision < 1.0);
}
