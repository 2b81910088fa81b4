use progseg::patchify::other_fraction;
use progseg::raster::{load_labeled, BandId, IrrigationClass};
use progseg::synth::{generate_dataset, generate_scene, generate_scene_with_layout, tile_seed, SceneParams, SpectralProfile};

fn band_values(img: &progseg::raster::MultispectralImage, mask: &progseg::raster::LabelMask, band: BandId, class: IrrigationClass) -> Vec<f64> {
    let b = img.band_index(band).unwrap();
    mask.data()
        .indexed_iter()
        .filter(|(_, &k)| k == class.code())
        .map(|((r, c), _)| img.data()[(r, c, b)] as f64)
        .collect()
}

/// Best accuracy of any single threshold (either polarity) separating two
/// equally weighted samples.
fn best_threshold_accuracy(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let (mut pos_below, mut neg_below) = (0.0, 0.0);
    let mut best: f64 = 0.5;
    for (i, &(_, is_pos)) in all.iter().enumerate() {
        if is_pos {
            pos_below += 1.0;
        } else {
            neg_below += 1.0;
        }
        if i + 1 < all.len() && all[i + 1].0 == all[i].0 {
            continue;
        }
        // Predict negative below the cut, positive above, or the reverse.
        let acc = 0.5 * (neg_below / nn + (np - pos_below) / np);
        best = best.max(acc).max(1.0 - acc);
    }
    best
}

#[test]
fn nir_only_class_needs_the_nir_band() {
    let mut flood = vec![Vec::new(); 4];
    let mut other = vec![Vec::new(); 4];
    let bands = [BandId::Red, BandId::Green, BandId::Blue, BandId::Nir];
    for i in 0..4 {
        let params = SceneParams {
            nir_only_class: true,
            seed: tile_seed(21, i),
            ..SceneParams::default()
        };
        let (img, mask) = generate_scene(&params).unwrap();
        for (j, &b) in bands.iter().enumerate() {
            flood[j].extend(band_values(&img, &mask, b, IrrigationClass::Flood));
            other[j].extend(band_values(&img, &mask, b, IrrigationClass::Other));
        }
    }
    for j in 0..3 {
        let acc = best_threshold_accuracy(&flood[j], &other[j]);
        assert!(acc < 0.55, "{:?} alone separates flood at {acc}", bands[j]);
    }
    // Sum of the visible bands, a further linear direction.
    let vis = |v: &[Vec<f64>]| (0..v[0].len()).map(|i| v[0][i] + v[1][i] + v[2][i]).collect::<Vec<_>>();
    assert!(best_threshold_accuracy(&vis(&flood), &vis(&other)) < 0.55);
    let nir = best_threshold_accuracy(&flood[3], &other[3]);
    assert!(nir > 0.95, "nir accuracy {nir}");
}

#[test]
fn class_means_match_profile() {
    let params = SceneParams {
        seed: 99,
        ..SceneParams::default()
    };
    let profile = SpectralProfile::standard(params.noise_sigma);
    let (img, mask) = generate_scene(&params).unwrap();
    for class in [IrrigationClass::Other, IrrigationClass::Flood, IrrigationClass::Sprinkler] {
        for &band in &params.bands {
            let v = band_values(&img, &mask, band, class);
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let expected = profile.classes[class.code() as usize].mean[band.code() as usize] as f64;
            assert!((mean - expected).abs() <= 3.0 * sd / n.sqrt(), "{class:?} {band:?}: {mean} vs {expected}");
        }
    }
}

#[test]
fn fields_are_discs_and_rectangles() {
    let params = SceneParams {
        seed: 4,
        ..SceneParams::default()
    };
    let (_, mask, layout) = generate_scene_with_layout(&params).unwrap();
    for p in &layout.pivots {
        let (cr, cc, rad) = (p.center.0 as f64, p.center.1 as f64, p.radius as f64);
        let mut count = 0usize;
        for ((r, c), &k) in mask.data().indexed_iter() {
            let inside = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) <= rad * rad;
            if inside {
                assert_eq!(k, IrrigationClass::Sprinkler.code());
                count += 1;
            }
        }
        let area = std::f64::consts::PI * rad * rad;
        assert!((count as f64 - area).abs() / area < 0.1);
    }
    for f in &layout.floods {
        for r in f.origin.0..f.origin.0 + f.height {
            for c in f.origin.1..f.origin.1 + f.width {
                assert_eq!(mask.data()[(r, c)], IrrigationClass::Flood.code());
            }
        }
    }
    let [_, flood, sprinkler] = mask.class_counts();
    assert_eq!(flood, layout.floods.iter().map(|f| f.height * f.width).sum::<usize>());
    assert!(sprinkler > 0);
}

#[test]
fn dataset_coverage_and_determinism() {
    let template = SceneParams::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_dataset(10, &template, 3, a.path()).unwrap();
    let mb = generate_dataset(10, &template, 3, b.path()).unwrap();
    assert_eq!(ma.tiles.len(), 10);
    assert_eq!(ma, mb);
    let mut total = 0.0;
    for t in &ma.tiles {
        let (img, mask) = load_labeled(a.path().join(&t.path), &template.bands).unwrap();
        let (_, mb_mask) = load_labeled(b.path().join(&t.path), &template.bands).unwrap();
        assert_eq!(mask, mb_mask);
        assert_eq!(img.n_bands(), 7);
        assert_eq!(other_fraction(&mask), t.other_fraction);
        total += t.other_fraction;
    }
    let mean = total / 10.0;
    let implied = template.implied_other_fraction();
    assert!((mean - implied).abs() <= 0.1, "mean {mean} implied {implied}");
}
