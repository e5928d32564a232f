use std::path::PathBuf;

use ab_glyph::{Font, FontRef};
use pixelrep::textimage::*;
use pixelrep::Error;
use proptest::prelude::*;

fn font_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fonts")
        .join(format!("{name}.ttf"))
}

/// Independent cmap oracle: walk the font's codepoint table.
fn cmap_has(name: &str, c: char) -> bool {
    let data = std::fs::read(font_path(name)).unwrap();
    let f = FontRef::try_from_slice(&data).unwrap();
    let found = f.codepoint_ids().any(|(_, cp)| cp == c);
    found
}

fn cfg() -> RenderConfig {
    RenderConfig::default()
}

#[test]
fn default_geometry() {
    let c = cfg();
    assert!((c.pixel_size() - 16.666_667).abs() < 1e-4);
    assert_eq!(c.canvas_height, 32);
    assert_eq!(c.baseline_y, 24);
    assert!(c.antialias);
}

#[test]
fn single_face_atlas() {
    let a = load_fonts(&[font_path("latin")]).unwrap();
    assert_eq!(a.len(), 1);
}

#[test]
fn empty_chain_is_an_error() {
    let err = load_fonts::<PathBuf>(&[]).unwrap_err();
    assert!(matches!(err, Error::EmptyFallbackChain));
    assert_eq!(err.to_string(), "empty fallback chain");
}

#[test]
fn corrupt_font_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.ttf");
    std::fs::write(&bad, b"not a font").unwrap();
    let err = load_fonts(&[font_path("latin"), bad.clone()]).unwrap_err();
    assert!(err.to_string().contains("broken.ttf"), "{err}");
    let missing = dir.path().join("missing.ttf");
    assert!(load_fonts(&[missing]).unwrap_err().to_string().contains("missing.ttf"));
}

#[test]
fn fallback_resolution() {
    assert!(!cmap_has("latin", '\u{0431}') && cmap_has("cyrillic", '\u{0431}'));
    assert!(!cmap_has("latin", '\u{044F}') && cmap_has("cyrillic", '\u{044F}'));
    let a = load_fonts(&[font_path("latin"), font_path("cyrillic")]).unwrap();
    assert_eq!(a.resolve_face('a'), FaceRef::Face(0));
    assert_eq!(a.resolve_face('\u{0431}'), FaceRef::Face(1));
    assert_eq!(a.resolve_face('я'), FaceRef::Face(1));
    // U+0378 is unassigned.
    assert_eq!(a.resolve_face('\u{0378}'), FaceRef::Notdef);
}

#[test]
fn bundled_chain_covers_corpus_scripts() {
    let a = FontAtlas::bundled();
    let names: Vec<&str> = a.faces().iter().map(|f| f.name.as_str()).collect();
    assert_eq!(names, ["latin", "cyrillic", "greek", "hebrew", "cjk"]);
    for (c, face) in [('e', 0), ('ж', 1), ('λ', 2), ('ש', 3), ('カ', 4), ('日', 4)] {
        assert_eq!(a.resolve_face(c), FaceRef::Face(face), "{c}");
    }
}

#[test]
fn render_is_deterministic() {
    let a = FontAtlas::bundled();
    let x = render_sentence("a", &a, &cfg()).unwrap();
    let y = render_sentence("a", &FontAtlas::bundled(), &cfg()).unwrap();
    assert_eq!(x, y);
    assert_eq!(
        x.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        y.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn empty_text_is_an_error() {
    let a = FontAtlas::bundled();
    assert!(matches!(render_sentence("", &a, &cfg()), Err(Error::EmptyInput)));
    assert!(matches!(measure_width("", &a, &cfg()), Err(Error::EmptyInput)));
    assert_eq!(
        render_sentence("", &a, &cfg()).unwrap_err().to_string(),
        "empty input line"
    );
}

#[test]
fn blank_and_inked() {
    let a = FontAtlas::bundled();
    assert_eq!(render_sentence("   ", &a, &cfg()).unwrap().mean_ink(), 0.0);
    assert!(render_sentence("M", &a, &cfg()).unwrap().mean_ink() > 0.0);
}

#[test]
fn width_matches_measure_and_font_advance() {
    let a = FontAtlas::bundled();
    for t in ["abc", "a", "Привет мир", "שלום", "カタカナ", "e\u{301}"] {
        assert_eq!(
            measure_width(t, &a, &cfg()).unwrap(),
            render_sentence(t, &a, &cfg()).unwrap().width,
            "{t}"
        );
    }
    // hmtx advance of 'a' in DejaVu Sans: 1255 units of 2048 at 16.67 px/em = 10.21 px.
    let diff = measure_width("aa", &a, &cfg()).unwrap() - measure_width("a", &a, &cfg()).unwrap();
    assert_eq!(diff, 10);
    assert_eq!(a.advance('a', cfg().pixel_size()), 10);
}

#[test]
fn marks_have_no_advance() {
    let a = FontAtlas::bundled();
    let px = cfg().pixel_size();
    assert_eq!(a.advance('\u{301}', px), 0);
    assert_eq!(
        measure_width("e\u{301}", &a, &cfg()).unwrap(),
        measure_width("e", &a, &cfg()).unwrap()
    );
    let plain = render_sentence("e", &a, &cfg()).unwrap();
    let marked = render_sentence("e\u{301}", &a, &cfg()).unwrap();
    assert!(marked.mean_ink() > plain.mean_ink());
}

#[test]
fn rtl_reverses_pen_order() {
    let a = FontAtlas::bundled();
    let pos = glyph_positions("אב", &a, &cfg()).unwrap();
    assert_eq!(pos[0].0, 'ב');
    assert_eq!(pos[1].0, 'א');
    assert!(is_rtl("  שלום abc"));
    assert!(!is_rtl("abc שלום"));
    // Points stay attached to their consonant after reversal.
    let pos = glyph_positions("שָׁב", &a, &cfg()).unwrap();
    let chars: Vec<char> = pos.iter().map(|p| p.0).collect();
    assert_eq!(chars, ['ב', 'ש', '\u{5B8}', '\u{5C1}']);
}

#[test]
fn unmapped_characters_render_notdef() {
    let a = FontAtlas::bundled_subset(&["latin"]).unwrap();
    let img = render_sentence("\u{0378}", &a, &cfg()).unwrap();
    assert!(img.mean_ink() > 0.0);
    assert!(render_sentence("x\u{10FFFF}я\u{E000}", &a, &cfg()).is_ok());
}

#[test]
fn binary_mode_is_two_valued() {
    let a = FontAtlas::bundled();
    let c = RenderConfig {
        antialias: false,
        ..cfg()
    };
    let img = render_sentence("Binary ŵ ж", &a, &c).unwrap();
    assert!(img.pixels.iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(img.mean_ink() > 0.0);
}

#[test]
fn invalid_config_is_rejected() {
    let a = FontAtlas::bundled();
    let c = RenderConfig {
        canvas_height: 12,
        baseline_y: 9,
        ..cfg()
    };
    assert!(matches!(render_sentence("a", &a, &c), Err(Error::Config(_))));
}

#[test]
fn pxr1_roundtrip() {
    let a = FontAtlas::bundled();
    let imgs: Vec<_> = ["hello", "мир", "Ωμέγα"]
        .iter()
        .map(|t| render_sentence(t, &a, &cfg()).unwrap())
        .collect();
    let mut buf = Vec::new();
    write_cache(&mut buf, 32, &imgs).unwrap();
    assert_eq!(&buf[..4], b"PXR1");
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 32);
    assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 3);
    let expect_len = 20 + imgs.iter().map(|i| 4 + 32 * i.width).sum::<usize>();
    assert_eq!(buf.len(), expect_len);
    let back = read_cache(&mut buf.as_slice()).unwrap();
    for (x, y) in imgs.iter().zip(&back) {
        assert_eq!(x.width, y.width);
        for (p, q) in x.pixels.iter().zip(&y.pixels) {
            assert!((p - q).abs() <= 0.5 / 255.0 + 1e-6);
            assert_eq!(*p == 0.0, *q == 0.0);
        }
    }
    buf[0] = b'X';
    assert!(read_cache(&mut buf.as_slice()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn height_and_range_invariant(s in "[a-zA-Zа-яА-Яα-ωא-ת0-9 ,.!?]{1,30}") {
        let a = FontAtlas::bundled();
        let img = render_sentence(&s, &a, &cfg()).unwrap();
        prop_assert_eq!(img.height, 32);
        prop_assert_eq!(img.pixels.len(), 32 * img.width);
        prop_assert!(img.width >= 1);
        prop_assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn appending_never_shrinks(s in "[a-zA-Z0-9 àéöçñ]{1,20}", c in "[a-zA-Z ,.;]") {
        let a = FontAtlas::bundled();
        let w0 = measure_width(&s, &a, &cfg()).unwrap();
        let w1 = measure_width(&format!("{s}{c}"), &a, &cfg()).unwrap();
        prop_assert!(w1 >= w0);
    }
}
