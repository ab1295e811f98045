use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{PhantomError, PhantomSpec, StudyVolume};
use crate::detect::components::connected_components;
use crate::grid::{Grid3, Mask3, Shape3};

const PLACEMENT_ATTEMPTS: usize = 2000;

struct Lesion {
    center_mm: [f64; 3],
    radius_mm: f64,
}

/// Stable 64-bit seed for a (spec seed, patient id) pair.
pub(crate) fn patient_seed(seed: u64, patient_id: &str) -> u64 {
    // FNV-1a over the id, then a splitmix64 finaliser.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in patient_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates one patient. Output is a pure function of `(spec, patient_id)`.
pub fn generate_phantom(spec: &PhantomSpec, patient_id: &str) -> Result<StudyVolume, PhantomError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(patient_seed(spec.seed, patient_id));
    let shape = spec.grid_shape;
    let spacing = spec.spacing_mm;

    let [lo, hi] = spec.n_lesions_range;
    let n_lesions = rng.gen_range(lo..=hi);
    let lesions = place_lesions(spec, n_lesions, &mut rng)?;

    let mut core = Mask3::empty(shape);
    for l in &lesions {
        rasterize_sphere(&mut core, spacing, l);
    }
    let dilated = core.dilate26().dilate26();
    let mut halo = dilated.clone();
    for (h, &c) in halo.data_mut().iter_mut().zip(core.data()) {
        *h &= !c;
    }

    let smooth = spec.background_texture.smoothness;
    let shared_bg = smooth_field(shape, smooth, &mut rng);
    let flair_bg = smooth_field(shape, smooth, &mut rng);

    let amp = spec.background_texture.noise_amplitude;
    let mut sequences = BTreeMap::new();
    for profile in &spec.sequence_profiles {
        let background = if is_t1_like(&profile.name) {
            &shared_bg
        } else {
            &flair_bg
        };
        let mut grid = Grid3::zeros(shape);
        for (i, v) in grid.data_mut().iter_mut().enumerate() {
            let mut val = background[i];
            if core.data()[i] {
                val += profile.lesion_contrast;
            } else if halo.data()[i] {
                val += profile.halo_contrast;
            }
            if amp > 0.0 {
                val += rng.gen_range(-amp..=amp);
            }
            *v = val as f32;
        }
        sequences.insert(profile.name.clone(), grid);
    }

    let gt_lesion_count = connected_components(&core).len();
    Ok(StudyVolume {
        patient_id: patient_id.to_string(),
        sequences,
        spacing_mm: spacing,
        gt_mask: Some(core),
        gt_lesion_count,
    })
}

/// FLAIR gets an independent background; every other profile shares the T1 field.
fn is_t1_like(name: &str) -> bool {
    !name.to_ascii_uppercase().starts_with("FLAIR")
}

fn place_lesions(spec: &PhantomSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Lesion>, PhantomError> {
    let spacing = spec.spacing_mm;
    let gap = 2.0 * spacing.iter().cloned().fold(0.0, f64::max);
    let [rlo, rhi] = spec.lesion_radius_range_mm;
    let mut placed: Vec<Lesion> = Vec::with_capacity(n);
    for lesion in 0..n {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let radius_mm = if rhi > rlo { rng.gen_range(rlo..=rhi) } else { rlo };
            let mut center_mm = [0.0; 3];
            let mut fits = true;
            for a in 0..3 {
                let extent = (spec.grid_shape[a] - 1) as f64 * spacing[a];
                let margin = radius_mm + spacing[a];
                if extent < 2.0 * margin {
                    fits = false;
                    break;
                }
                center_mm[a] = rng.gen_range(margin..=extent - margin);
            }
            if !fits {
                continue;
            }
            let clear = placed.iter().all(|p| {
                let d = dist(p.center_mm, center_mm);
                d > p.radius_mm + radius_mm + gap
            });
            if clear {
                placed.push(Lesion {
                    center_mm,
                    radius_mm,
                });
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(PhantomError::Capacity {
                lesion,
                requested: n,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }
    Ok(placed)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn rasterize_sphere(mask: &mut Mask3, spacing: [f64; 3], lesion: &Lesion) {
    let shape = mask.shape();
    let mut range = [(0usize, 0usize); 3];
    for a in 0..3 {
        let lo = ((lesion.center_mm[a] - lesion.radius_mm) / spacing[a]).floor().max(0.0) as usize;
        let hi = ((lesion.center_mm[a] + lesion.radius_mm) / spacing[a]).ceil() as usize;
        range[a] = (lo, hi.min(shape[a] - 1));
    }
    for z in range[0].0..=range[0].1 {
        for y in range[1].0..=range[1].1 {
            for x in range[2].0..=range[2].1 {
                let p = [z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]];
                if dist(p, lesion.center_mm) <= lesion.radius_mm {
                    mask.set(z, y, x, true);
                }
            }
        }
    }
}

/// Gaussian-filtered white noise normalised to zero mean and unit variance.
fn smooth_field(shape: Shape3, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let mut field: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    if sigma > 0.0 {
        let kernel = gaussian_kernel(sigma);
        for axis in 0..3 {
            field = convolve_axis(&field, shape, axis, &kernel);
        }
    }
    let mean = field.iter().sum::<f64>() / n as f64;
    let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt().max(1e-12);
    field.iter_mut().for_each(|v| *v = (*v - mean) / std);
    field
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// 1D convolution along `axis` with edge clamping.
fn convolve_axis(src: &[f64], shape: Shape3, axis: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let strides = [shape[1] * shape[2], shape[2], 1];
    let len = shape[axis] as isize;
    let mut out = vec![0.0; src.len()];
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let pos = [z, y, x];
                let base = z * strides[0] + y * strides[1] + x * strides[2] - pos[axis] * strides[axis];
                let c = pos[axis] as isize;
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let q = (c + ki as isize - r).clamp(0, len - 1) as usize;
                    acc += w * src[base + q * strides[axis]];
                }
                out[base + pos[axis] * strides[axis]] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{canonical_profiles, BackgroundTexture};

    fn small_spec(lesions: [usize; 2], seed: u64) -> PhantomSpec {
        PhantomSpec {
            grid_shape: [12, 24, 24],
            spacing_mm: [1.0, 1.0, 1.0],
            n_lesions_range: lesions,
            lesion_radius_range_mm: [1.5, 2.5],
            sequence_profiles: canonical_profiles(),
            background_texture: BackgroundTexture {
                smoothness: 1.5,
                noise_amplitude: 0.1,
            },
            seed,
        }
    }

    #[test]
    fn zero_lesions_gives_empty_mask() {
        let v = generate_phantom(&small_spec([0, 0], 1), "p0").unwrap();
        assert_eq!(v.gt_lesion_count, 0);
        assert_eq!(v.gt_mask.unwrap().count(), 0);
    }

    #[test]
    fn deterministic_per_patient() {
        let spec = small_spec([1, 3], 11);
        let a = generate_phantom(&spec, "p1").unwrap();
        let b = generate_phantom(&spec, "p1").unwrap();
        let c = generate_phantom(&spec, "p2").unwrap();
        assert_eq!(a, b);
        assert_ne!(a.sequences["FLAIR"], c.sequences["FLAIR"]);
    }

    #[test]
    fn overcrowded_grid_reports_capacity() {
        let mut spec = small_spec([40, 40], 3);
        spec.grid_shape = [8, 8, 8];
        match generate_phantom(&spec, "p") {
            Err(PhantomError::Capacity { requested: 40, .. }) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn lesion_cores_are_bright_in_a_post_sequence() {
        let spec = small_spec([2, 2], 5);
        let v = generate_phantom(&spec, "p").unwrap();
        let gt = v.gt_mask.as_ref().unwrap();
        let post = &v.sequences["BRAVO-post"];
        let pre = &v.sequences["CUBE-pre"];
        for (i, &m) in gt.data().iter().enumerate() {
            if m {
                assert!(post.data()[i] - pre.data()[i] > 1.0);
            }
        }
    }

    #[test]
    fn kernel_sums_to_one() {
        let k = gaussian_kernel(1.3);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k.len() % 2, 1);
    }
}
