use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nback_core::dataset::{generate_instance, Alphabet, MATCH, SEQ_LEN};
use nback_core::stats::chi_square_sf;

fn chi_square(observed: &[f64], expected: &[f64]) -> f64 {
    observed
        .iter()
        .zip(expected)
        .map(|(o, e)| (o - e).powi(2) / e)
        .sum()
}

#[test]
fn match_positions_are_uniform_over_eligible_slots() {
    let samples = 100_000;
    for n in [1, 3, 6] {
        let mut rng = ChaCha8Rng::seed_from_u64(40 + n as u64);
        let mut counts = [0.0; SEQ_LEN];
        for _ in 0..samples {
            let inst = generate_instance(n, &mut rng).unwrap();
            for (i, c) in inst.labels.chars().enumerate() {
                if c == MATCH {
                    counts[i] += 1.0;
                }
            }
        }
        assert!(counts[..n].iter().all(|&c| c == 0.0));
        let eligible = &counts[n..];
        let expected = vec![samples as f64 * 8.0 / (SEQ_LEN - n) as f64; eligible.len()];
        let stat = chi_square(eligible, &expected);
        let p = chi_square_sf(stat, eligible.len() - 1);
        assert!(p > 0.001, "N={n}: chi-square {stat}, p {p}");
    }
}

#[test]
fn free_positions_use_the_whole_alphabet_uniformly() {
    let samples = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = vec![0.0; Alphabet::SIZE];
    for _ in 0..samples {
        let inst = generate_instance(4, &mut rng).unwrap();
        let first = inst.sequence.chars().next().unwrap();
        counts[Alphabet::index_of(first).unwrap()] += 1.0;
    }
    let expected = vec![samples as f64 / Alphabet::SIZE as f64; Alphabet::SIZE];
    let p = chi_square_sf(chi_square(&counts, &expected), Alphabet::SIZE - 1);
    assert!(p > 0.001, "p {p}");
}

#[test]
fn nonmatch_letters_avoid_only_the_n_back_letter() {
    // At a nonmatch position the letter is uniform over the 19 others.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 2;
    let mut offsets = [0.0; Alphabet::SIZE];
    for _ in 0..20_000 {
        let inst = generate_instance(n, &mut rng).unwrap();
        let ids = inst.token_ids();
        for (i, c) in inst.labels.chars().enumerate().skip(n) {
            if c != MATCH {
                let d = (ids[i] + Alphabet::SIZE - ids[i - n]) % Alphabet::SIZE;
                offsets[d] += 1.0;
            }
        }
    }
    assert_eq!(offsets[0], 0.0);
    let total: f64 = offsets.iter().sum();
    let expected = vec![total / 19.0; 19];
    let p = chi_square_sf(chi_square(&offsets[1..], &expected), 18);
    assert!(p > 0.001, "p {p}");
}
