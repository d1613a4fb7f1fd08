use std::collections::BTreeSet;
use std::f64::consts::PI;

use fedoap::synthdata::{
    decode_sample, encode_sample, generate_client_dataset, read_dataset, read_sample, split_dataset, write_dataset,
    write_sample, OrganProfile, Sample, SynthError, FOSS_HEADER_BYTES,
};
use proptest::prelude::*;

const SIZE: usize = 32;

fn profiles() -> Vec<OrganProfile> {
    ["breast_like", "brain_like", "liver_like", "lung_like"]
        .iter()
        .map(|n| OrganProfile::by_name(n).unwrap())
        .collect()
}

fn mask_at(s: &Sample, y: isize, x: isize) -> bool {
    let (h, w) = s.size();
    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && s.mask.data()[y as usize * w + x as usize] == 1.0
}

/// Contour length by marching squares over the zero-padded mask, with
/// crossings at edge midpoints: a cut corner costs √2/2, a straight
/// crossing 1.
fn marching_squares_perimeter(s: &Sample) -> f64 {
    let (h, w) = s.size();
    let mut total = 0.0;
    for y in -1..h as isize {
        for x in -1..w as isize {
            let corners = [
                mask_at(s, y, x),
                mask_at(s, y, x + 1),
                mask_at(s, y + 1, x + 1),
                mask_at(s, y + 1, x),
            ];
            let on = corners.iter().filter(|&&c| c).count();
            total += match on {
                0 | 4 => 0.0,
                1 | 3 => 0.5 * 2f64.sqrt(),
                _ if corners[0] == corners[2] => 2f64.sqrt(), // saddle: two cut corners
                _ => 1.0,
            };
        }
    }
    total
}

fn area(s: &Sample) -> f64 {
    s.mask.data().iter().sum()
}

fn compactness(s: &Sample) -> f64 {
    let p = marching_squares_perimeter(s);
    4.0 * PI * area(s) / (p * p)
}

/// Signed mean lesion intensity minus mean background intensity.
fn contrast_estimate(s: &Sample) -> f64 {
    let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for (&v, &m) in s.image.data().iter().zip(s.mask.data()) {
        if m == 1.0 {
            fg += v;
            nf += 1.0;
        } else {
            bg += v;
            nb += 1.0;
        }
    }
    fg / nf - bg / nb
}

#[test]
fn generation_is_a_pure_function_of_its_inputs() {
    for p in profiles() {
        let a = generate_client_dataset(&p, 30, SIZE, 9).unwrap();
        let b = generate_client_dataset(&p, 30, SIZE, 9).unwrap();
        assert_eq!(a, b);
        // sample i does not depend on how many were asked for
        let prefix = generate_client_dataset(&p, 7, SIZE, 9).unwrap();
        assert_eq!(&a[..7], &prefix[..]);
        let other = generate_client_dataset(&p, 30, SIZE, 10).unwrap();
        assert_ne!(a, other);
    }
}

#[test]
fn samples_are_well_formed() {
    for p in profiles() {
        for s in generate_client_dataset(&p, 100, SIZE, 1).unwrap() {
            assert_eq!(s.image.shape(), &[1, SIZE, SIZE]);
            assert_eq!(s.mask.shape(), &[SIZE, SIZE]);
            assert!(area(&s) > 0.0, "{} sample {} has an empty mask", p.name, s.sample_id);
            assert!(s.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
            for &v in s.image.data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(v, v as f32 as f64);
            }
        }
    }
}

#[test]
fn smooth_outlines_rasterize_to_compact_disks() {
    // At 32 px these disks have 3 to 5 px radii and pixelation alone pulls
    // the marching-squares compactness of a few below 0.85; at 128 px the
    // radii are 13 to 20 px and the shape, not the grid, dominates.
    let p = OrganProfile {
        boundary_irregularity: 0.0,
        ..OrganProfile::breast_like()
    };
    let mut worst = f64::INFINITY;
    for s in generate_client_dataset(&p, 200, 128, 2).unwrap() {
        worst = worst.min(compactness(&s));
    }
    assert!(worst > 0.85, "least compact disk {worst}");
}

#[test]
fn full_contrast_without_texture_separates_by_one_threshold() {
    let p = OrganProfile {
        contrast: 1.0,
        background_texture: 0.0,
        ..OrganProfile::brain_like()
    };
    for s in generate_client_dataset(&p, 50, SIZE, 3).unwrap() {
        for (&v, &m) in s.image.data().iter().zip(s.mask.data()) {
            assert_eq!(v > 0.5, m == 1.0);
        }
    }
}

#[test]
fn lesions_differ_from_background_by_half_the_contrast() {
    for p in profiles() {
        for s in generate_client_dataset(&p, 200, SIZE, 4).unwrap() {
            let c = contrast_estimate(&s);
            assert!(c.abs() >= 0.5 * p.contrast, "{} sample {}: {c}", p.name, s.sample_id);
            assert_eq!(c < 0.0, p.intensity_inversion);
        }
    }
}

#[test]
fn mask_area_stays_within_radius_bounds() {
    for p in profiles() {
        let s_px = SIZE as f64;
        let (rmin, rmax) = p.lesion_radius_range;
        let irr = p.boundary_irregularity;
        // every lesion contains the disk of radius r_min·(1 − irr) and lies
        // inside the disk of radius r_max·(1 + irr); one pixel of slack for
        // rasterization
        let inner = (rmin * s_px * (1.0 - irr) - 1.0).max(0.0);
        let outer = rmax * s_px * (1.0 + irr) + 1.0;
        let lo = PI * inner * inner;
        let hi = p.lesion_count_range.1 as f64 * PI * outer * outer;
        for s in generate_client_dataset(&p, 200, SIZE, 5).unwrap() {
            let a = area(&s);
            assert!(a >= lo && a <= hi, "{}: area {a} outside [{lo}, {hi}]", p.name);
        }
    }
}

#[test]
fn default_profiles_are_distinguishable() {
    let stats = |s: &Sample| [area(s) / (SIZE * SIZE) as f64, compactness(s), contrast_estimate(s)];
    let sets: Vec<(Vec<[f64; 3]>, Vec<[f64; 3]>)> = profiles()
        .iter()
        .map(|p| {
            let fit = generate_client_dataset(p, 200, SIZE, 6).unwrap().iter().map(stats).collect();
            let held = generate_client_dataset(p, 200, SIZE, 7).unwrap().iter().map(stats).collect();
            (fit, held)
        })
        .collect();
    // nearest centroid on standardized features
    let all: Vec<[f64; 3]> = sets.iter().flat_map(|(f, _)| f.iter().copied()).collect();
    let n = all.len() as f64;
    let mut mean = [0.0; 3];
    let mut sd = [0.0; 3];
    for j in 0..3 {
        mean[j] = all.iter().map(|v| v[j]).sum::<f64>() / n;
        sd[j] = (all.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
    }
    let z = |v: &[f64; 3]| [0, 1, 2].map(|j| (v[j] - mean[j]) / sd[j]);
    let centroids: Vec<[f64; 3]> = sets
        .iter()
        .map(|(f, _)| {
            let mut c = [0.0; 3];
            for v in f {
                let zv = z(v);
                (0..3).for_each(|j| c[j] += zv[j] / f.len() as f64);
            }
            c
        })
        .collect();
    let (mut right, mut total) = (0, 0);
    for (label, (_, held)) in sets.iter().enumerate() {
        for v in held {
            let zv = z(v);
            let guess = (0..centroids.len())
                .min_by(|&a, &b| {
                    let d = |c: &[f64; 3]| (0..3).map(|j| (zv[j] - c[j]).powi(2)).sum::<f64>();
                    d(&centroids[a]).total_cmp(&d(&centroids[b]))
                })
                .unwrap();
            right += (guess == label) as usize;
            total += 1;
        }
    }
    let accuracy = right as f64 / total as f64;
    assert!(accuracy >= 0.95, "accuracy {accuracy}");
}

#[test]
fn invalid_profiles_are_rejected() {
    let base = OrganProfile::breast_like();
    let bad = [
        OrganProfile {
            lesion_count_range: (0, 1),
            ..base.clone()
        },
        OrganProfile {
            lesion_count_range: (3, 2),
            ..base.clone()
        },
        OrganProfile {
            lesion_radius_range: (0.0, 0.1),
            ..base.clone()
        },
        OrganProfile {
            lesion_radius_range: (0.2, 0.5),
            ..base.clone()
        },
        OrganProfile {
            contrast: 0.0,
            ..base.clone()
        },
        OrganProfile {
            background_texture: -0.1,
            ..base.clone()
        },
    ];
    for p in bad {
        assert!(matches!(generate_client_dataset(&p, 3, SIZE, 0), Err(SynthError::InvalidProfile(_))));
    }
    assert!(generate_client_dataset(&base, 0, SIZE, 0).is_err());
}

#[test]
fn splits_follow_the_ten_percent_rule() {
    let samples = generate_client_dataset(&OrganProfile::breast_like(), 100, 8, 0).unwrap();
    let splits = split_dataset(samples.clone(), 0.1, 0.1, 3).unwrap();
    assert_eq!((splits.train.len(), splits.val.len(), splits.test.len()), (81, 9, 10));
    let ids = |v: &[Sample]| v.iter().map(|s| s.sample_id).collect::<BTreeSet<_>>();
    let (tr, va, te) = (ids(&splits.train), ids(&splits.val), ids(&splits.test));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    let union: BTreeSet<u64> = tr.union(&va).chain(te.iter()).copied().collect();
    assert_eq!(union, (0..100).collect());
    let again = split_dataset(samples.clone(), 0.1, 0.1, 3).unwrap();
    assert_eq!(again, splits);
    let other = split_dataset(samples.clone(), 0.1, 0.1, 4).unwrap();
    assert_ne!(ids(&other.test), te);
    assert!(matches!(
        split_dataset(samples[..5].to_vec(), 0.1, 0.1, 0),
        Err(SynthError::SplitTooSmall { n: 5 })
    ));
}

#[test]
fn sample_files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for (i, s) in generate_client_dataset(&OrganProfile::liver_like(), 5, 12, 8)
        .unwrap()
        .into_iter()
        .enumerate()
    {
        let path = dir.path().join(format!("{i}.foss"));
        write_sample(&path, &s).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, 14 + 4 * 144 + 144);
        assert_eq!(read_sample(&path, s.sample_id).unwrap(), s);
    }
}

#[test]
fn damaged_files_are_rejected() {
    let s = &generate_client_dataset(&OrganProfile::breast_like(), 1, 6, 0).unwrap()[0];
    let bytes = encode_sample(s);
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert_eq!(decode_sample(&bad, 0), Err(SynthError::BadMagic));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert_eq!(decode_sample(&bad, 0), Err(SynthError::VersionUnsupported(2)));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(decode_sample(&longer, 0), Err(SynthError::TruncatedFile { .. })));
    assert_eq!(decode_sample(b"FO", 0), Err(SynthError::TruncatedFile { expected: FOSS_HEADER_BYTES, actual: 2 }));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_sample(&dir.path().join("missing.foss"), 0), Err(SynthError::Io(_))));
}

#[test]
fn manifests_round_trip_through_disk() {
    let p = OrganProfile::brain_like();
    let samples = generate_client_dataset(&p, 20, 8, 11).unwrap();
    let splits = split_dataset(samples, 0.1, 0.1, 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &p, 11, &splits).unwrap();
    assert_eq!(manifest.train.len() + manifest.val.len() + manifest.test.len(), 20);
    let (back, loaded) = read_dataset(dir.path()).unwrap();
    assert_eq!(back, manifest);
    assert_eq!(loaded, splits);
}

proptest! {
    #[test]
    fn truncation_never_yields_a_sample(cut in 0usize..200) {
        let s = &generate_client_dataset(&OrganProfile::lung_like(), 1, 6, 1).unwrap()[0];
        let bytes = encode_sample(s);
        prop_assume!(cut < bytes.len());
        let is_truncated = matches!(decode_sample(&bytes[..cut], 0), Err(SynthError::TruncatedFile { .. }));
        prop_assert!(is_truncated);
    }
}

