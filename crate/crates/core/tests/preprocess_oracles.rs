use image::{Rgb, RgbImage};
use nhi_core::par::Exec;
use nhi_core::preprocess::{self, MorphConfig, ProfileName, QcReason, QcThresholds, TilingProfile, TissueMask};
use proptest::prelude::*;

/// HSV by the sector formula on integer channels.
fn hsv_oracle(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let (ri, gi, bi) = (r as i32, g as i32, b as i32);
    let max = ri.max(gi).max(bi);
    let min = ri.min(gi).min(bi);
    let c = (max - min) as f64;
    let v = max as f64 / 255.0;
    let s = if max == 0 { 0.0 } else { c / max as f64 };
    let h = if c == 0.0 {
        0.0
    } else if max == ri {
        let x = 60.0 * (gi - bi) as f64 / c;
        if x < 0.0 {
            x + 360.0
        } else {
            x
        }
    } else if max == gi {
        120.0 + 60.0 * (bi - ri) as f64 / c
    } else {
        240.0 + 60.0 * (ri - gi) as f64 / c
    };
    (h, s, v)
}

fn mask_strategy() -> impl Strategy<Value = TissueMask> {
    (1u32..14, 1u32..14).prop_flat_map(|(w, h)| {
        prop::collection::vec(any::<bool>(), (w * h) as usize)
            .prop_map(move |bits| TissueMask::from_bits(w, h, bits).unwrap())
    })
}

/// Set-definition morphology: dilation marks every pixel within `r` of a
/// set pixel; erosion keeps pixels whose in-bounds disc is all set.
fn set_morph(mask: &TissueMask, r: i32, dilate: bool) -> Vec<bool> {
    let (w, h) = (mask.width as i32, mask.height as i32);
    let mut out = vec![false; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut neighbours = Vec::new();
            for yy in 0..h {
                for xx in 0..w {
                    if (xx - x).pow(2) + (yy - y).pow(2) <= r * r {
                        neighbours.push(mask.get(xx as u32, yy as u32));
                    }
                }
            }
            out[(y * w + x) as usize] = if dilate {
                neighbours.iter().any(|&b| b)
            } else {
                neighbours.iter().all(|&b| b)
            };
        }
    }
    out
}

fn laplacian_oracle(gray: &[f64], w: usize, h: usize) -> f64 {
    let kernel = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
    let mut responses = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut acc = 0.0;
            for (ky, row) in kernel.iter().enumerate() {
                for (kx, k) in row.iter().enumerate() {
                    acc += k * gray[(y + ky - 1) * w + (x + kx - 1)];
                }
            }
            responses.push(acc);
        }
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    responses.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

proptest! {
    #[test]
    fn hsv_matches_sector_formula(r: u8, g: u8, b: u8) {
        let (h, s, v) = preprocess::rgb_to_hsv(r, g, b);
        let (eh, es, ev) = hsv_oracle(r, g, b);
        prop_assert!((h - eh).abs() < 1e-9 && (s - es).abs() < 1e-12 && (v - ev).abs() < 1e-12);
        prop_assert!((0.0..360.0).contains(&h));
        let sat = preprocess::saturation_u8(r, g, b) as f64;
        prop_assert!((sat - es * 255.0).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn dilation_and_erosion_match_set_definitions(mask in mask_strategy(), r in 0u32..3) {
        prop_assert_eq!(preprocess::dilate(&mask, r).bits().to_vec(), set_morph(&mask, r as i32, true));
        prop_assert_eq!(preprocess::erode(&mask, r).bits().to_vec(), set_morph(&mask, r as i32, false));
    }

    #[test]
    fn cleanup_without_component_removal_is_idempotent(mask in mask_strategy(), r in 0u32..3) {
        let once = preprocess::morph_cleanup(&mask, r, 0);
        prop_assert_eq!(preprocess::morph_cleanup(&once, r, 0), once);
    }

    #[test]
    fn laplacian_variance_matches_convolution(
        (w, h, gray) in (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(0.0f64..255.0, w * h))
        })
    ) {
        let got = preprocess::laplacian_variance(&gray, w, h);
        if w < 3 || h < 3 {
            prop_assert_eq!(got, 0.0);
        } else {
            let want = laplacian_oracle(&gray, w, h);
            prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0));
        }
    }

    #[test]
    fn planned_tiles_lie_on_the_stride_grid(w in 0u32..3000, h in 0u32..3000, p in 0usize..3) {
        let profile = TilingProfile::get([ProfileName::T0, ProfileName::T1, ProfileName::T2][p]);
        let tiles = preprocess::plan_tiles("s", w, h, &profile);
        let stride = profile.stride();
        for t in &tiles {
            prop_assert!(t.x % stride == 0 && t.y % stride == 0);
            prop_assert!(t.x + t.width <= w && t.y + t.height <= h);
            prop_assert_eq!(t.level, profile.level);
        }
        // no room left for another column or row
        if let Some(last) = tiles.last() {
            prop_assert!(last.x + stride + profile.tile_size > w);
            prop_assert!(last.y + stride + profile.tile_size > h);
        }
    }
}

#[test]
fn checkerboard_closing_and_opening() {
    let bits: Vec<bool> = (0..64).map(|i| (i % 8 + i / 8) % 2 == 0).collect();
    let board = TissueMask::from_bits(8, 8, bits).unwrap();
    let closed = preprocess::erode(&preprocess::dilate(&board, 1), 1);
    let dilated = TissueMask::from_bits(8, 8, set_morph(&board, 1, true)).unwrap();
    assert_eq!(closed.bits(), &set_morph(&dilated, 1, false)[..]);
    // every pixel has a set 4-neighbour, so dilation fills and closing stays full
    assert!(closed.bits().iter().all(|&b| b));
    let opened = preprocess::dilate(&preprocess::erode(&board, 1), 1);
    assert_eq!(opened.count(), 0);
}

#[test]
fn two_tone_histogram_matches_exhaustive_search() {
    let img = RgbImage::from_fn(64, 64, |x, _| {
        if x < 24 {
            Rgb([240, 238, 236])
        } else {
            Rgb([180, 60, 150])
        }
    });
    let hist = preprocess::saturation_histogram(&img);
    let t = preprocess::otsu_threshold(&hist).unwrap();
    let lo = preprocess::saturation_u8(240, 238, 236);
    let hi = preprocess::saturation_u8(180, 60, 150);
    // two occupied bins: every threshold in [lo, hi) separates them equally well
    assert_eq!(t, lo);
    assert!(t < hi);
    let mask = preprocess::detect_tissue(&img).unwrap();
    assert_eq!(mask.count(), 40 * 64);
}

fn textured_slide(size: u32, tissue_from_x: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| {
        if x < tissue_from_x {
            Rgb([242, 241, 240])
        } else if (x / 2 + y / 2) % 2 == 0 {
            Rgb([200, 80, 170])
        } else {
            Rgb([120, 30, 100])
        }
    })
}

#[test]
fn tiling_a_two_tone_slide() {
    let level = textured_slide(640, 320);
    let thumb = image::imageops::resize(&level, 80, 80, image::imageops::FilterType::Nearest);
    let profile = TilingProfile::get(ProfileName::T0);
    let run = |exec| {
        preprocess::tile_slide(
            "s",
            &level,
            &thumb,
            3,
            &profile,
            &MorphConfig::default(),
            &QcThresholds::default(),
            exec,
        )
        .unwrap()
    };
    let result = run(Exec::Sequential);
    assert_eq!(result.records.len(), 4);
    let reasons: Vec<QcReason> = result.records.iter().map(|r| r.reason).collect();
    assert_eq!(
        reasons,
        [QcReason::LowTissue, QcReason::Ok, QcReason::LowTissue, QcReason::Ok]
    );
    assert_eq!(run(Exec::Parallel).records, result.records);
}

#[test]
fn flat_tissue_is_blurry() {
    let tile = RgbImage::from_pixel(32, 32, Rgb([128, 128, 128]));
    let mask = TissueMask::filled(32, 32, true);
    let t = preprocess::plan_tiles(
        "s",
        32,
        32,
        &TilingProfile {
            tile_size: 32,
            ..TilingProfile::get(ProfileName::T0)
        },
    );
    let record = preprocess::qc_filter(&t[0], &tile, &mask, &QcThresholds::default());
    assert_eq!(record.reason, QcReason::Blurry);
    assert_eq!(record.sharpness, 0.0);
}
