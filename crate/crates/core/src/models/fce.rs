//! Full-context embeddings: a bidirectional LSTM over the support set and an
//! attention LSTM that reads the support set while refining each query.

use rand::Rng;

use super::weights::{Bound, NetworkWeights, Role};
use crate::autodiff::{lstm_step, Graph, LstmVars, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_READ_STEPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchingConfig {
    pub fce_enabled: bool,
    /// Attention-LSTM read steps over the support set.
    pub fce_steps: usize,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            fce_enabled: true,
            fce_steps: DEFAULT_READ_STEPS,
        }
    }
}

impl MatchingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fce_enabled && self.fce_steps == 0 {
            return Err(Error::invalid("matching_config", "fce_steps must be at least 1"));
        }
        Ok(())
    }
}

const SUPPORT_DIRECTIONS: [&str; 2] = ["fce_g.fwd", "fce_g.bwd"];
const QUERY_CELL: &str = "fce_f";

fn cell_names(prefix: &str) -> [String; 3] {
    [
        format!("{prefix}.w_ih"),
        format!("{prefix}.w_hh"),
        format!("{prefix}.bias"),
    ]
}

pub fn fce_param_names() -> Vec<String> {
    SUPPORT_DIRECTIONS
        .iter()
        .chain(std::iter::once(&QUERY_CELL))
        .flat_map(|p| cell_names(p))
        .collect()
}

/// Seeded initialisation of both FCE cells for embedding width `dim`.
pub fn init_fce<T: Element, R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<NetworkWeights> {
    let mut w = NetworkWeights::new();
    let mut add_cell = |w: &mut NetworkWeights, prefix: &str, role: Role, recurrent: usize| -> Result<()> {
        let [ih, hh, b] = cell_names(prefix);
        let bound_ih = (1.0 / dim as f64).sqrt();
        let bound_hh = (1.0 / recurrent as f64).sqrt();
        w.insert(ih, role, Tensor::<T>::uniform(&[4 * dim, dim], bound_ih, rng))?;
        w.insert(hh, role, Tensor::<T>::uniform(&[4 * dim, recurrent], bound_hh, rng))?;
        w.insert(b, role, Tensor::<T>::uniform(&[4 * dim], bound_ih, rng))
    };
    for p in SUPPORT_DIRECTIONS {
        add_cell(&mut w, p, Role::FceG, dim)?;
    }
    add_cell(&mut w, QUERY_CELL, Role::FceF, 2 * dim)?;
    Ok(w)
}

fn cell_vars(params: &Bound, prefix: &str) -> Result<LstmVars> {
    let [ih, hh, b] = cell_names(prefix);
    Ok(LstmVars {
        w_ih: params.var(&ih)?,
        w_hh: params.var(&hh)?,
        bias: params.var(&b)?,
    })
}

fn hidden_of<T: Element>(graph: &Graph<T>, cell: &LstmVars) -> usize {
    graph.shape(cell.w_ih)[0] / 4
}

/// Support context `g(xᵢ) = h_fwd(i) + h_bwd(i) + xᵢ` over `support: [M, D]`,
/// taken in the given (class, shot) order.
pub fn fce_support<T: Element>(graph: &mut Graph<T>, params: &Bound, support: Var) -> Result<Var> {
    let shape = graph.shape(support).to_vec();
    let [m, d] = shape[..] else {
        return Err(Error::invalid("fce_support", format!("expected [M, D], got {shape:?}")));
    };
    let fwd = cell_vars(params, SUPPORT_DIRECTIONS[0])?;
    let bwd = cell_vars(params, SUPPORT_DIRECTIONS[1])?;
    for cell in [&fwd, &bwd] {
        let hidden = hidden_of(graph, cell);
        if hidden != d {
            return Err(Error::shape("fce_support", &[m, d], &[hidden * 4, d]));
        }
    }
    let rows: Vec<Var> = (0..m)
        .map(|i| graph.gather_rows(support, &[i]))
        .collect::<Result<_>>()?;

    let run = |graph: &mut Graph<T>, cell: &LstmVars, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Option<Var>>> {
        let mut h = graph.constant(Tensor::zeros(&[1, d]));
        let mut c = graph.constant(Tensor::zeros(&[1, d]));
        let mut out = vec![None; m];
        for i in order {
            let (h2, c2) = lstm_step(graph, rows[i], h, c, cell)?;
            h = h2;
            c = c2;
            out[i] = Some(h);
        }
        Ok(out)
    };
    let forward = run(graph, &fwd, &mut (0..m))?;
    let backward = run(graph, &bwd, &mut (0..m).rev())?;

    let mut ctx = Vec::with_capacity(m);
    for i in 0..m {
        let both = graph.add(forward[i].unwrap(), backward[i].unwrap())?;
        ctx.push(graph.add(both, rows[i])?);
    }
    graph.concat_rows(&ctx)
}

/// Refine `queries: [Q, D]` by `steps` attention reads over `support_ctx: [M, D]`.
///
/// With `h₀ = 0`, `c₀ = 0`, each step computes the readout
/// `r = softmax(h·gᵀ)·g`, runs the cell on the query with recurrent input `[h, r]`,
/// and adds the query back as a skip term.
pub fn fce_query<T: Element>(graph: &mut Graph<T>, params: &Bound, queries: Var, support_ctx: Var, steps: usize) -> Result<Var> {
    if steps == 0 {
        return Err(Error::invalid("fce_query", "read steps must be at least 1"));
    }
    let qs = graph.shape(queries).to_vec();
    let ss = graph.shape(support_ctx).to_vec();
    if qs.len() != 2 || ss.len() != 2 || qs[1] != ss[1] {
        return Err(Error::shape("fce_query", &qs, &ss));
    }
    let (q, d) = (qs[0], qs[1]);
    let cell = cell_vars(params, QUERY_CELL)?;
    if hidden_of(graph, &cell) != d {
        return Err(Error::shape("fce_query", &qs, graph.shape(cell.w_ih)));
    }
    let mut h = graph.constant(Tensor::zeros(&[q, d]));
    let mut c = graph.constant(Tensor::zeros(&[q, d]));
    for _ in 0..steps {
        let scores = graph.matmul_nt(h, support_ctx)?;
        let attention = graph.softmax_rows(scores)?;
        let readout = graph.matmul(attention, support_ctx)?;
        let state = graph.concat_cols(&[h, readout])?;
        let (h_cell, c_next) = lstm_step(graph, queries, state, c, &cell)?;
        h = graph.add(h_cell, queries)?;
        c = c_next;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_fce(dim: usize) -> NetworkWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = init_fce::<f64, _>(dim, &mut rng).unwrap();
        let mut z = NetworkWeights::new();
        for e in w.entries() {
            z.insert(&e.name, e.role, Tensor::<f64>::zeros(e.tensor.shape())).unwrap();
        }
        z
    }

    #[test]
    fn zero_weights_are_identity() {
        let w = zero_fce(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::<f64>::uniform(&[6, 4], 1.0, &mut rng);
        let q = Tensor::<f64>::uniform(&[2, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let p = w.bind(&mut g, &fce_param_names(), false).unwrap();
        let sv = g.constant(s.clone());
        let qv = g.constant(q.clone());
        let ctx = fce_support(&mut g, &p, sv).unwrap();
        assert_eq!(g.value(ctx), &s);
        let out = fce_query(&mut g, &p, qv, ctx, 1).unwrap();
        assert_eq!(g.value(out), &q);
    }

    #[test]
    fn single_support_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = init_fce::<f64, _>(3, &mut rng).unwrap();
        let mut g = Graph::<f64>::new();
        let p = w.bind(&mut g, &fce_param_names(), false).unwrap();
        let s = g.constant(Tensor::uniform(&[1, 3], 1.0, &mut rng));
        let ctx = fce_support(&mut g, &p, s).unwrap();
        assert_eq!(g.shape(ctx), &[1, 3]);
        assert!(g.value(ctx).is_finite());
    }

    #[test]
    fn more_read_steps_change_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = init_fce::<f64, _>(4, &mut rng).unwrap();
        let s = Tensor::<f64>::uniform(&[5, 4], 1.0, &mut rng);
        let q = Tensor::<f64>::uniform(&[1, 4], 1.0, &mut rng);
        let run = |steps| {
            let mut g = Graph::new();
            let p = w.bind(&mut g, &fce_param_names(), false).unwrap();
            let sv = g.constant(s.clone());
            let qv = g.constant(q.clone());
            let out = fce_query(&mut g, &p, qv, sv, steps).unwrap();
            g.value(out).clone()
        };
        let (one, three) = (run(1), run(3));
        let diff: f64 = one.data().iter().zip(three.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "{diff}");
    }

    #[test]
    fn dimension_mismatch_and_zero_steps_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = init_fce::<f64, _>(4, &mut rng).unwrap();
        let mut g = Graph::<f64>::new();
        let p = w.bind(&mut g, &fce_param_names(), false).unwrap();
        let s = g.constant(Tensor::zeros(&[3, 5]));
        assert!(fce_support(&mut g, &p, s).is_err());
        let s4 = g.constant(Tensor::zeros(&[3, 4]));
        let q4 = g.constant(Tensor::zeros(&[1, 4]));
        assert!(fce_query(&mut g, &p, q4, s4, 0).is_err());
        assert!(MatchingConfig {
            fce_enabled: true,
            fce_steps: 0
        }
        .validate()
        .is_err());
    }
}
