use pixelrep::pixeltok::*;
use pixelrep::textimage::{render_sentence, FontAtlas, RenderConfig, SentenceImage};
use proptest::prelude::*;

fn wc(w: usize, s: usize) -> WindowConfig {
    WindowConfig { h: 32, w, s }
}

/// Brute-force oracle: windows start at 0, s, 2s, ... until one reaches the end.
fn enumerate_starts(width: usize, w: usize, s: usize) -> usize {
    let mut n = 0;
    let mut start = 0;
    loop {
        n += 1;
        if start + w >= width {
            return n;
        }
        start += s;
    }
}

fn image(width: usize, seed: u32) -> SentenceImage {
    let pixels = (0..32 * width)
        .map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / u32::MAX as f32)
        .collect();
    SentenceImage {
        height: 32,
        width,
        pixels,
        text: String::new(),
    }
}

#[test]
fn count_examples() {
    let c = WindowConfig::default();
    assert_eq!((c.h, c.w, c.s), (32, 32, 16));
    assert_eq!(window_count(32, &c), 1);
    assert_eq!(window_count(100, &c), 6);
    assert_eq!(window_count(33, &c), 2);
    assert_eq!(window_count(1, &c), 1);
}

#[test]
fn count_matches_enumeration() {
    for w in [1, 7, 32] {
        for s in 1..=w {
            for width in 1..=500 {
                assert_eq!(
                    window_count(width, &wc(w, s)),
                    enumerate_starts(width, w, s),
                    "width {width} w {w} s {s}"
                );
            }
        }
    }
}

#[test]
fn blank_image_gives_blank_windows() {
    let img = SentenceImage {
        height: 32,
        width: 48,
        pixels: vec![0.0; 32 * 48],
        text: String::new(),
    };
    let t = tokenize(&img, &WindowConfig::default()).unwrap();
    assert_eq!(t.n_tokens(), 2);
    assert!(t.windows.iter().all(|w| w.iter().all(|&v| v == 0.0)));
}

#[test]
fn height_mismatch_and_bad_stride() {
    let img = SentenceImage {
        height: 24,
        width: 10,
        pixels: vec![0.0; 240],
        text: String::new(),
    };
    assert!(tokenize(&img, &WindowConfig::default()).is_err());
    let img = image(40, 1);
    assert!(tokenize(&img, &wc(32, 33)).is_err());
    assert!(tokenize(&img, &wc(32, 0)).is_err());
}

#[test]
fn padding_beyond_source_is_zero() {
    let img = image(100, 3);
    let t = tokenize(&img, &WindowConfig::default()).unwrap();
    let last = &t.windows[5];
    for y in 0..32 {
        for x in 0..32 {
            let col = 80 + x;
            let want = if col < 100 { img.get(y, col) } else { 0.0 };
            assert_eq!(last[y * 32 + x], want);
        }
    }
}

#[test]
fn collate_lengths() {
    let c = WindowConfig::default();
    let a = tokenize(&image(20, 1), &c).unwrap();
    let b = tokenize(&image(60, 2), &c).unwrap();
    let one = collate(&[&b], &["de".into()], &c).unwrap();
    assert!(one.pad_mask.iter().all(|p| !p));
    let batch = collate(&[&a, &b], &["de".into(), "ru".into()], &c).unwrap();
    assert_eq!(batch.t_max, 3);
    assert_eq!(batch.pad_mask, vec![false, true, true, false, false, false]);
    assert_eq!(batch.lengths(), vec![1, 3]);
    assert!(batch.window(0, 1).iter().all(|&v| v == 0.0));
    assert_eq!(batch.window(1, 2), b.windows[2].as_slice());
    assert!(matches!(collate(&[], &[], &c), Err(pixelrep::Error::EmptyBatch)));
}

proptest! {
    #[test]
    fn overlap_identity(width in 1usize..300, seed in any::<u32>()) {
        let img = image(width, seed);
        let t = tokenize(&img, &WindowConfig::default()).unwrap();
        prop_assert_eq!(t.n_tokens(), window_count(width, &WindowConfig::default()));
        for k in 0..t.n_tokens().saturating_sub(1) {
            for y in 0..32 {
                prop_assert_eq!(&t.windows[k][y * 32 + 16..y * 32 + 32], &t.windows[k + 1][y * 32..y * 32 + 16]);
            }
        }
    }

    #[test]
    fn non_overlapping_roundtrip(width in 1usize..200, w in 1usize..40, seed in any::<u32>()) {
        let c = wc(w, w);
        let img = image(width, seed);
        let t = tokenize(&img, &c).unwrap();
        let batch = collate(&[&t], &["x".into()], &c).unwrap();
        let total = batch.t_max * w;
        prop_assert!(total >= width);
        for y in 0..32 {
            for x in 0..total {
                let v = batch.window(0, x / w)[y * w + x % w];
                let want = if x < width { img.get(y, x) } else { 0.0 };
                prop_assert_eq!(v, want);
            }
        }
    }

    #[test]
    fn collate_conserves_tokens(widths in proptest::collection::vec(1usize..200, 1..6)) {
        let c = WindowConfig::default();
        let seqs: Vec<_> = widths.iter().map(|&w| tokenize(&image(w, 9), &c).unwrap()).collect();
        let refs: Vec<_> = seqs.iter().collect();
        let tags = vec!["x".to_string(); seqs.len()];
        let b = collate(&refs, &tags, &c).unwrap();
        prop_assert_eq!(b.pad_mask.iter().filter(|p| !**p).count(), seqs.iter().map(|s| s.n_tokens()).sum::<usize>());
        for (bi, s) in seqs.iter().enumerate() {
            for t in s.n_tokens()..b.t_max {
                prop_assert!(b.window(bi, t).iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn rendered_text_tokenizes() {
    let a = FontAtlas::bundled();
    let img = render_sentence(
        "The quick brown fox jumps over the lazy dog.",
        &a,
        &RenderConfig::default(),
    )
    .unwrap();
    let t = tokenize(&img, &WindowConfig::default()).unwrap();
    assert_eq!(t.n_tokens(), window_count(img.width, &WindowConfig::default()));
    assert_eq!(t.source_width, img.width);
}
