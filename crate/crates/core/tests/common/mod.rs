//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library code it is used to check.

#![allow(dead_code)]

use edgecache::experiment::ExperimentConfig;
use rand::Rng;

/// Zipf pmf over ranks `1..=n` summed in ascending rank order.
pub fn zipf_oracle(p: f64, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|k| 1.0 / (k as f64).powf(p)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Girvan-Newman by exhaustive path enumeration. `phi` is a symmetric
/// affinity matrix; an edge exists where `phi > 0` and has length
/// `1 / phi`. Edge betweenness sums, over unordered node pairs, the share of
/// shortest paths that cross the edge. The highest-scoring edge is removed
/// (near-ties go to the smallest `(i, j)`) until `target` components remain.
/// Returns the partition as sorted member lists.
pub fn brute_force_gn(phi: &[Vec<f64>], target: usize) -> Vec<Vec<usize>> {
    let n = phi.len();
    let mut adj: Vec<Vec<Option<f64>>> = (0..n)
        .map(|i| (0..n).map(|j| (i != j && phi[i][j] > 0.0).then(|| 1.0 / phi[i][j])).collect())
        .collect();
    while partition_of(&adj).len() < target {
        let mut best: Option<((usize, usize), f64)> = None;
        for (e, score) in betweenness_by_paths(&adj) {
            match best {
                None => best = Some((e, score)),
                Some((_, b)) if score > b && !close(score, b) => best = Some((e, score)),
                _ => {}
            }
        }
        let ((i, j), _) = best.expect("graph has edges left");
        adj[i][j] = None;
        adj[j][i] = None;
    }
    partition_of(&adj)
}

pub fn partition_of(adj: &[Vec<Option<f64>>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut parts = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut stack = vec![s];
        let mut part = Vec::new();
        seen[s] = true;
        while let Some(v) = stack.pop() {
            part.push(v);
            for w in 0..n {
                if adj[v][w].is_some() && !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        part.sort();
        parts.push(part);
    }
    parts.sort();
    parts
}

/// Edge scores in lexicographic edge order.
pub fn betweenness_by_paths(adj: &[Vec<Option<f64>>]) -> Vec<((usize, usize), f64)> {
    let n = adj.len();
    let mut score = vec![vec![0.0; n]; n];
    for s in 0..n {
        for t in s + 1..n {
            let mut paths: Vec<(f64, Vec<usize>)> = Vec::new();
            let mut on_path = vec![false; n];
            on_path[s] = true;
            simple_paths(adj, s, t, 0.0, &mut vec![s], &mut on_path, &mut paths);
            let Some(shortest) = paths.iter().map(|p| p.0).reduce(f64::min) else {
                continue;
            };
            let best: Vec<&Vec<usize>> = paths.iter().filter(|p| close(p.0, shortest)).map(|p| &p.1).collect();
            let share = 1.0 / best.len() as f64;
            for p in best {
                for w in p.windows(2) {
                    let (a, b) = (w[0].min(w[1]), w[0].max(w[1]));
                    score[a][b] += share;
                }
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if adj[i][j].is_some() {
                out.push(((i, j), score[i][j]));
            }
        }
    }
    out
}

fn simple_paths(
    adj: &[Vec<Option<f64>>],
    v: usize,
    t: usize,
    len: f64,
    path: &mut Vec<usize>,
    on_path: &mut [bool],
    out: &mut Vec<(f64, Vec<usize>)>,
) {
    if v == t {
        out.push((len, path.clone()));
        return;
    }
    for w in 0..adj.len() {
        if let (Some(l), false) = (adj[v][w], on_path[w]) {
            on_path[w] = true;
            path.push(w);
            simple_paths(adj, w, t, len + l, path, on_path, out);
            path.pop();
            on_path[w] = false;
        }
    }
}

/// Random symmetric affinity matrix. About a third of the pairs have no
/// edge; with `coarse` the weights come from a three-value set so that
/// equal path lengths and betweenness ties are common.
pub fn random_affinity<R: Rng>(n: usize, coarse: bool, rng: &mut R) -> Vec<Vec<f64>> {
    let mut phi = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(0.35) {
                continue;
            }
            let v = if coarse {
                [0.25, 0.5, 1.0][rng.random_range(0..3)]
            } else {
                rng.random_range(0.05..1.0)
            };
            phi[i][j] = v;
            phi[j][i] = v;
        }
    }
    phi
}

/// Layer-by-layer reference forward pass of a ReLU MLP with flat
/// `[W (row-major, out x in), b]` parameters per layer.
pub fn mlp_forward(sizes: &[usize], params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let mut off = 0;
    for l in 0..sizes.len() - 1 {
        let (ni, no) = (sizes[l], sizes[l + 1]);
        let mut z = vec![0.0; no];
        for (o, zo) in z.iter_mut().enumerate() {
            *zo = params[off + ni * no + o];
            for i in 0..ni {
                *zo += params[off + o * ni + i] * a[i];
            }
        }
        if l + 2 < sizes.len() {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        a = z;
        off += (ni + 1) * no;
    }
    a
}

pub fn td_loss(sizes: &[usize], params: &[f64], states: &[Vec<f64>], actions: &[usize], targets: &[f64]) -> f64 {
    let n = states.len() as f64;
    states
        .iter()
        .zip(actions)
        .zip(targets)
        .map(|((s, &a), &y)| {
            let e = mlp_forward(sizes, params, s)[a] - y;
            0.5 * e * e / n
        })
        .sum()
}

/// Five BSs with 20 slots, 500 contents, eight clients per BS and a small
/// agent network, over five seeds.
pub fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::shipped_defaults();
    cfg.network.cap = 20;
    cfg.workload.model.catalogue_size = 500;
    cfg.policy.agent.hidden = vec![32, 32];
    cfg.policy.agent.batch_size = 32;
    cfg.policy.agent.train_every = 4;
    cfg.run.seeds = vec![1, 2, 3, 4, 5];
    cfg
}
