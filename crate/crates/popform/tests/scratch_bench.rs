mod common;

use popform::cli::{replicate_population, sample_pooled_training};
use popform::gp::{HyperBounds, Part};
use popform::modal::band_grid;
use popform::omgp;
use std::time::Instant;

#[test]
#[ignore]
fn bench_omgp_fit() {
    let grid = band_grid(48.0, 56.0, 0.0488).unwrap();
    let frfs = common::blade_frfs(&grid);
    let replicated = replicate_population(&frfs, 10, 0.05, 11).unwrap();
    let (training, labels) = sample_pooled_training(&replicated, Part::Real, 200, 12).unwrap();
    let bounds = HyperBounds {
        natural_frequency_hz: (40.0, 60.0),
        ..HyperBounds::default()
    };
    let opts = omgp::OmgpOptions::default();

    let t0 = Instant::now();
    let model = omgp::fit(&training, 4, &bounds, 2, 7, None, &opts).unwrap();
    let elapsed = t0.elapsed();
    let map = model.map_labels();

    // Best label permutation match.
    let mut best = 0usize;
    let perms = permutations(4);
    for perm in &perms {
        let hits = map
            .iter()
            .zip(&labels)
            .filter(|(m, l)| perm[**m] == **l)
            .count();
        best = best.max(hits);
    }
    eprintln!(
        "fit took {:?}; trace len {}; final lbc {:.3}; label recovery {}/{}; sigma {:.4}; converged {}",
        elapsed,
        model.bound_trace.len(),
        model.bound_trace.last().unwrap(),
        best,
        labels.len(),
        model.noise_std,
        model.converged,
    );
    for (i, c) in model.components.iter().enumerate() {
        eprintln!(
            "comp{}: l={:.3} sf={:.3} fn={:.3} zeta={:.5} A={:.3}",
            i,
            c.length_scale,
            c.process_std,
            c.mean_modes.modes[0].natural_frequency_hz,
            c.mean_modes.modes[0].damping_ratio,
            c.mean_modes.modes[0].residue
        );
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn recurse(current: &mut Vec<usize>, remaining: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if remaining.is_empty() {
            out.push(current.clone());
            return;
        }
        for i in 0..remaining.len() {
            let v = remaining.remove(i);
            current.push(v);
            recurse(current, remaining, out);
            current.pop();
            remaining.insert(i, v);
        }
    }
    let mut out = Vec::new();
    recurse(&mut Vec::new(), &mut (0..k).collect(), &mut out);
    out
}
