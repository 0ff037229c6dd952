use rayon::prelude::*;

use super::labeled::{LabeledSet, Provenance, SoftLabel};
use super::{BlendMode, World};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::prompts::{PromptRecord, PromptStrategy};

fn add_noise(image: &mut [f64], sigma: f64, rng: &mut RngStream) {
    for v in image.iter_mut() {
        *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
    }
}

/// `n` samples of the in-distribution meaning of `class`, hard-labelled.
pub fn sample_real(world: &World, class: usize, n: usize, rng: &mut RngStream) -> Result<LabeledSet> {
    world.check_class(class)?;
    if n == 0 {
        return Err(Error::pre("sample_real needs n >= 1"));
    }
    let proto = world.in_distribution_prototype(class).data();
    let sigma = world.spec().noise;
    let mut data = Vec::with_capacity(n * proto.len());
    for _ in 0..n {
        let start = data.len();
        data.extend_from_slice(proto);
        add_noise(&mut data[start..], sigma, rng);
    }
    let [c, h, w] = world.spec().image_shape();
    LabeledSet::new(Tensor::new(vec![n, c, h, w], data)?, vec![SoftLabel::hard(class); n], Provenance::Real)
}

/// `per_class` real samples of every class, interleaved class by class.
pub fn sample_real_balanced(world: &World, per_class: usize, rng: &mut RngStream) -> Result<LabeledSet> {
    if per_class == 0 {
        return Err(Error::pre("sample_real_balanced needs per_class >= 1"));
    }
    let k = world.num_classes();
    let mut data = Vec::with_capacity(per_class * k * world.spec().pixels());
    let mut labels = Vec::with_capacity(per_class * k);
    let sigma = world.spec().noise;
    for _ in 0..per_class {
        for class in 0..k {
            let start = data.len();
            data.extend_from_slice(world.in_distribution_prototype(class).data());
            add_noise(&mut data[start..], sigma, rng);
            labels.push(SoftLabel::hard(class));
        }
    }
    let [c, h, w] = world.spec().image_shape();
    LabeledSet::new(Tensor::new(vec![per_class * k, c, h, w], data)?, labels, Provenance::Real)
}

/// Meaning chosen for one class mention: off-distribution with probability
/// `polysemy_bias` (uniform among off-distribution meanings), else in-distribution.
fn resolve_meaning(world: &World, class: usize, rng: &mut RngStream) -> usize {
    let c = &world.spec().classes[class];
    let u = rng.uniform();
    if u < c.polysemy_bias {
        let off: Vec<usize> = (0..c.meanings.len()).filter(|&m| m != c.in_distribution).collect();
        off[if off.len() == 1 { 0 } else { rng.below(off.len()) }]
    } else {
        c.in_distribution
    }
}

/// Region fractions: `(λ, 1 − λ)` with `λ ~ U(λ_lo, λ_hi)` for two classes,
/// Dirichlet(1, …, 1) for more.
fn draw_fractions(world: &World, n: usize, rng: &mut RngStream) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    if n == 2 {
        let (lo, hi) = world.spec().lambda_range;
        let lambda = rng.uniform_range(lo, hi);
        return vec![lambda, 1.0 - lambda];
    }
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Integer band boundaries along an axis of length `len`; every band gets at
/// least one line.
fn band_cuts(fractions: &[f64], len: usize) -> Vec<usize> {
    let n = fractions.len();
    let mut cuts = Vec::with_capacity(n + 1);
    cuts.push(0);
    let mut acc = 0.0;
    for (k, f) in fractions.iter().enumerate().take(n - 1) {
        acc += f;
        let lo = cuts[k] + 1;
        let hi = len - (n - 1 - k);
        cuts.push(((acc * len as f64).round() as usize).clamp(lo, hi));
    }
    cuts.push(len);
    cuts
}

/// Renders one record. Draw order: band orientation, region fractions, one
/// meaning per class, then pixel noise.
pub fn render_prompt(world: &World, record: &PromptRecord, rng: &mut RngStream) -> Result<(Tensor, SoftLabel)> {
    if record.class_ids.is_empty() {
        return Err(Error::pre(format!("record {} names no class", record.id)));
    }
    for &c in &record.class_ids {
        world.check_class(c)?;
    }
    let spec = world.spec();
    let (ch, h, w) = (spec.channels, spec.height, spec.width);
    let n = record.class_ids.len();
    let vertical_bands = rng.bernoulli(0.5);
    let fractions = draw_fractions(world, n, rng);
    let meanings: Vec<usize> = record.class_ids.iter().map(|&c| resolve_meaning(world, c, rng)).collect();
    let protos: Vec<&[f64]> =
        record.class_ids.iter().zip(&meanings).map(|(&c, &m)| world.prototype(c, m).data()).collect();

    let mut image = vec![0.0; ch * h * w];
    let weights: Vec<f64> = match spec.blend {
        BlendMode::Convex => {
            for (p, f) in protos.iter().zip(&fractions) {
                for (o, v) in image.iter_mut().zip(p.iter()) {
                    *o += f * v;
                }
            }
            fractions
        }
        BlendMode::Spatial => {
            let len = if vertical_bands { w } else { h };
            let cuts = band_cuts(&fractions, len);
            for plane in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        let pos = if vertical_bands { x } else { y };
                        let k = cuts.partition_point(|&c| c <= pos) - 1;
                        let idx = (plane * h + y) * w + x;
                        image[idx] = protos[k][idx];
                    }
                }
            }
            cuts.windows(2).map(|b| (b[1] - b[0]) as f64 / len as f64).collect()
        }
    };
    add_noise(&mut image, spec.noise, rng);
    let label = SoftLabel::from_weights(record.class_ids.iter().copied().zip(weights).collect())?;
    Ok((Tensor::new(vec![ch, h, w], image)?, label))
}

fn provenance_of(strategy: PromptStrategy) -> Provenance {
    match strategy {
        PromptStrategy::Mixup => Provenance::SyntheticMixup,
        PromptStrategy::Nclass => Provenance::SyntheticNclass,
        _ => Provenance::SyntheticSingle,
    }
}

/// Renders every record with its own stream `(record.seed, 0)`, in parallel;
/// the result is independent of scheduling. All records must map to the same
/// provenance.
pub fn render_manifest(world: &World, records: &[PromptRecord]) -> Result<LabeledSet> {
    let first = records.first().ok_or_else(|| Error::pre("empty prompt manifest"))?;
    let provenance = provenance_of(first.strategy);
    if let Some(r) = records.iter().find(|r| provenance_of(r.strategy) != provenance) {
        return Err(Error::pre(format!(
            "manifest mixes {:?} and {:?} records (record {})",
            first.strategy, r.strategy, r.id
        )));
    }
    let rendered: Vec<(Tensor, SoftLabel)> = records
        .par_iter()
        .map(|r| render_prompt(world, r, &mut RngStream::new(r.seed, 0)))
        .collect::<Result<_>>()?;
    let [c, h, w] = world.spec().image_shape();
    let mut data = Vec::with_capacity(records.len() * c * h * w);
    let mut labels = Vec::with_capacity(records.len());
    for (img, label) in rendered {
        data.extend(img.into_data());
        labels.push(label);
    }
    LabeledSet::new(Tensor::new(vec![records.len(), c, h, w], data)?, labels, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{gen_mixup_class, gen_nclass, gen_single_class, default_templates, PairingPolicy, Vocabulary};
    use crate::world::{WorldConfig, WorldSpec};

    fn world_with(cfg: WorldConfig, vocab: &Vocabulary) -> World {
        World::new(WorldSpec::from_vocab(vocab, &cfg).unwrap()).unwrap()
    }

    fn default_world() -> World {
        world_with(WorldConfig::default(), &Vocabulary::default_ten())
    }

    fn single(class: usize) -> PromptRecord {
        PromptRecord {
            id: 0,
            strategy: PromptStrategy::Single,
            template_id: 0,
            class_ids: vec![class],
            text: String::new(),
            seed: 0,
        }
    }

    fn mean_image(set: &LabeledSet) -> Vec<f64> {
        let p = set.images.row_len();
        let mut m = vec![0.0; p];
        for i in 0..set.len() {
            for (a, v) in m.iter_mut().zip(set.image(i)) {
                *a += v / set.len() as f64;
            }
        }
        m
    }

    #[test]
    fn noise_free_real_samples_equal_prototype() {
        let cfg = WorldConfig { noise: 0.0, ..WorldConfig::default() };
        let world = world_with(cfg, &Vocabulary::default_ten());
        let set = sample_real(&world, 4, 5, &mut RngStream::new(1, 0)).unwrap();
        for i in 0..5 {
            assert_eq!(set.image(i), world.in_distribution_prototype(4).data());
        }
        assert_eq!(set.hard_labels(), vec![4; 5]);
    }

    #[test]
    fn real_sampling_errors() {
        let world = default_world();
        let mut rng = RngStream::new(1, 0);
        assert!(sample_real(&world, 3, 0, &mut rng).is_err());
        assert!(matches!(sample_real(&world, 10, 1, &mut rng), Err(Error::Precondition(_))));
    }

    #[test]
    fn disjoint_seeds_agree_in_mean() {
        let world = default_world();
        let n = 400;
        let a = sample_real(&world, 2, n, &mut RngStream::new(11, 0)).unwrap();
        let b = sample_real(&world, 2, n, &mut RngStream::new(12, 0)).unwrap();
        assert_ne!(a.images, b.images);
        let sigma = world.spec().noise;
        // pixel-wise difference of two means has sd sigma·sqrt(2/n); clamping only shrinks it
        let tol = 3.0 * sigma * (2.0 / n as f64).sqrt() * 1.5;
        let (ma, mb) = (mean_image(&a), mean_image(&b));
        let worst = ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < tol, "worst pixel mean gap {worst} >= {tol}");
    }

    #[test]
    fn fully_biased_single_prompt_renders_off_distribution() {
        // low noise keeps the clamp from pulling the mean towards mid-grey
        let vocab = Vocabulary::default_ten().with_polysemy(&[(0, 1.0)]).unwrap();
        let world = world_with(WorldConfig { noise: 0.2, ..WorldConfig::default() }, &vocab);
        let mut rng = RngStream::new(5, 0);
        let n = 1000;
        let mut acc = vec![0.0; world.spec().pixels()];
        for _ in 0..n {
            let (img, label) = render_prompt(&world, &single(0), &mut rng).unwrap();
            assert_eq!(label, SoftLabel::hard(0));
            for (a, v) in acc.iter_mut().zip(img.data()) {
                *a += v / n as f64;
            }
        }
        let dist = |p: &Tensor| acc.iter().zip(p.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let off = dist(world.prototype(0, 1));
        let on = dist(world.prototype(0, 0));
        assert!(off < 0.2, "mean render far from off-distribution prototype: {off}");
        assert!(on > 5.0 * off);
    }

    #[test]
    fn unbiased_single_prompt_matches_real_distribution() {
        let world = default_world();
        let n = 2000;
        let real = sample_real(&world, 3, n, &mut RngStream::new(21, 0)).unwrap();
        let mut rng = RngStream::new(22, 0);
        let mut synth = Vec::new();
        for _ in 0..n {
            synth.extend(render_prompt(&world, &single(3), &mut rng).unwrap().0.into_data());
        }
        let p = world.spec().pixels();
        let synth = LabeledSet::new(
            Tensor::new(vec![n, 1, 16, 16], synth).unwrap(),
            vec![SoftLabel::hard(3); n],
            Provenance::SyntheticSingle,
        )
        .unwrap();
        let (mr, ms) = (mean_image(&real), mean_image(&synth));
        let sigma = world.spec().noise;
        let tol = 4.0 * sigma * (2.0 / n as f64).sqrt();
        for j in 0..p {
            assert!((mr[j] - ms[j]).abs() < tol, "pixel {j}");
        }
        // per-pixel variance agrees too
        let var = |s: &LabeledSet, m: &[f64], j: usize| {
            (0..n).map(|i| (s.image(i)[j] - m[j]).powi(2)).sum::<f64>() / (n - 1) as f64
        };
        for j in (0..p).step_by(17) {
            let (vr, vs) = (var(&real, &mr, j), var(&synth, &ms, j));
            assert!((vr / vs - 1.0).abs() < 0.2, "pixel {j}: {vr} vs {vs}");
        }
    }

    #[test]
    fn forced_half_lambda_gives_even_label() {
        let cfg = WorldConfig { lambda_range: (0.5, 0.5), ..WorldConfig::default() };
        let world = world_with(cfg, &Vocabulary::default_ten());
        let rng = RngStream::new(3, 0);
        let recs =
            gen_mixup_class(&Vocabulary::default_ten(), &default_templates(), 50, &PairingPolicy::random(), &rng).unwrap();
        for r in &recs {
            let (_, label) = render_prompt(&world, r, &mut RngStream::new(r.seed, 0)).unwrap();
            assert_eq!(label.weight(r.class_ids[0]), 0.5);
            assert_eq!(label.weight(r.class_ids[1]), 0.5);
        }
    }

    #[test]
    fn noise_free_mixup_is_spatial_split_of_prototypes() {
        let cfg = WorldConfig { noise: 0.0, ..WorldConfig::default() };
        let vocab = Vocabulary::default_ten().with_polysemy(&[(0, 0.0), (5, 0.0)]).unwrap();
        let world = world_with(cfg, &vocab);
        let rec = PromptRecord { strategy: PromptStrategy::Mixup, class_ids: vec![1, 6], ..single(0) };
        for s in 0..20 {
            let (img, label) = render_prompt(&world, &rec, &mut RngStream::new(s, 0)).unwrap();
            let (a, b) = (world.prototype(1, 0).data(), world.prototype(6, 0).data());
            let from_a = img.data().iter().zip(a).filter(|(x, y)| x == y).count();
            let from_b = img.data().iter().zip(b).filter(|(x, y)| x == y).count();
            assert_eq!(from_a + from_b, 256);
            assert_eq!(from_a as f64 / 256.0, label.weight(1));
            let wa = label.weight(1);
            assert!((0.25..=0.75).contains(&wa), "{wa}");
        }
    }

    #[test]
    fn nclass_labels_are_probability_vectors() {
        let world = default_world();
        let vocab = Vocabulary::default_ten();
        for n in [3, 4] {
            let recs = gen_nclass(&vocab, &default_templates(), 100, n, &RngStream::new(n as u64, 0)).unwrap();
            let set = render_manifest(&world, &recs).unwrap();
            assert_eq!(set.provenance, Provenance::SyntheticNclass);
            for (r, l) in recs.iter().zip(&set.labels) {
                assert_eq!(l.entries().len(), n);
                let s: f64 = l.entries().iter().map(|e| e.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
                for c in &r.class_ids {
                    assert!(l.weight(*c) >= 1.0 / 16.0);
                }
            }
            assert!(set.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn manifest_rendering_is_reproducible() {
        let world = default_world();
        let vocab = Vocabulary::default_ten();
        let recs = gen_single_class(&vocab, &default_templates(), 64, &RngStream::new(8, 0)).unwrap();
        let a = render_manifest(&world, &recs).unwrap();
        let b = render_manifest(&world, &recs).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        // rendering a suffix alone gives the same images: per-record streams
        let tail = render_manifest(&world, &recs[10..]).unwrap();
        assert_eq!(tail.image(0), a.image(10));
        let mixed = vec![recs[0].clone(), PromptRecord { strategy: PromptStrategy::Mixup, class_ids: vec![1, 2], ..recs[1].clone() }];
        assert!(render_manifest(&world, &mixed).is_err());
        assert!(render_manifest(&world, &[]).is_err());
    }

    #[test]
    fn convex_blend_labels_follow_lambda() {
        let cfg = WorldConfig { noise: 0.0, blend: BlendMode::Convex, ..WorldConfig::default() };
        let world = world_with(cfg, &Vocabulary::default_ten());
        let rec = PromptRecord { strategy: PromptStrategy::Mixup, class_ids: vec![2, 3], ..single(0) };
        let (img, label) = render_prompt(&world, &rec, &mut RngStream::new(4, 0)).unwrap();
        let l = label.weight(2);
        let (a, b) = (world.prototype(2, 0).data(), world.prototype(3, 0).data());
        for j in 0..256 {
            assert!((img.data()[j] - (l * a[j] + (1.0 - l) * b[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn band_cuts_keep_every_band_nonempty() {
        assert_eq!(band_cuts(&[0.5, 0.5], 16), vec![0, 8, 16]);
        assert_eq!(band_cuts(&[0.001, 0.001, 0.998], 16), vec![0, 1, 2, 16]);
        assert_eq!(band_cuts(&[0.998, 0.001, 0.001], 16), vec![0, 14, 15, 16]);
    }
}
