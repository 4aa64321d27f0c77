use circomp::eval::{jsd_norm, kl_divergence, mask_overlap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        return v;
    }
    raw.into_iter().map(|x| x / s).collect()
}

#[test]
fn jsd_is_symmetric_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..12);
        let p = random_dist(&mut rng, n);
        let q = random_dist(&mut rng, n);
        let a = jsd_norm(&p, &q).unwrap();
        assert_eq!(a, jsd_norm(&q, &p).unwrap());
        assert!((0.0..=1.0).contains(&a));
        assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
    }
}

#[test]
fn overlap_algebra_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1_000 {
        let n = rng.gen_range(1..200);
        let density = rng.gen::<f64>();
        let a: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
        let (iou, iom) = mask_overlap(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&iou) && iou <= iom && iom <= 1.0);
        if a.iter().any(|x| *x) {
            assert_eq!(mask_overlap(&a, &a).unwrap(), (1.0, 1.0));
            let not_a: Vec<bool> = a.iter().map(|x| !x).collect();
            assert_eq!(mask_overlap(&a, &not_a).unwrap(), (0.0, 0.0));
        }
    }
}
