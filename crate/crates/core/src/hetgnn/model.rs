use super::{
    conv_bias, conv_neigh, conv_self, proj_bias, proj_weight, SampledSubgraph, DECODER_B, DECODER_W,
};
use crate::encoders::{EmbeddingBlock, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::relmodel::EntityGraph;
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

/// Feature rows for every node of `sub`, in local order.
pub fn gather_features<T: Scalar>(
    g: &EntityGraph,
    feats: &EmbeddingMatrix,
    sub: &SampledSubgraph,
) -> Result<Tensor<T>> {
    let blocks: Vec<Option<&EmbeddingBlock>> =
        g.blocks.iter().map(|b| feats.block(&b.table)).collect();
    let d = feats.dim;
    let mut data = Vec::with_capacity(sub.num_nodes() * d);
    for &node in &sub.nodes {
        let (t, ord) = g.local(node);
        let block = blocks[t].ok_or_else(|| {
            Error::invalid(format!(
                "missing feature block for table '{}'",
                g.blocks[t].table
            ))
        })?;
        if ord >= block.rows {
            return Err(Error::invalid(format!(
                "feature block '{}' has {} rows, node needs row {ord}",
                block.table, block.rows
            )));
        }
        data.extend(block.row(ord, d).iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::matrix(sub.num_nodes(), d, data)
}

/// Seed embeddings, one row per requested seed.
///
/// `tables[t]` names the projection used for nodes of table index `t`, and
/// `x` holds one input row per subgraph node. Layer ℓ is evaluated only on
/// nodes within `L − ℓ` hops of a seed, which is all the seeds depend on.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    tables: &[String],
    sub: &SampledSubgraph,
    x: Var,
) -> Result<Var> {
    let n = sub.num_nodes();
    if tape.value(x).rows() != n {
        return Err(Error::shape(
            "forward",
            format!(
                "{} feature rows for {n} subgraph nodes",
                tape.value(x).rows()
            ),
        ));
    }
    let mut by_type: Vec<Vec<usize>> = vec![Vec::new(); tables.len()];
    for (i, &t) in sub.types.iter().enumerate() {
        by_type
            .get_mut(t)
            .ok_or_else(|| Error::invalid(format!("node type {t} has no table name")))?
            .push(i);
    }
    let mut parts = Vec::new();
    let mut pos = vec![usize::MAX; n];
    let mut row = 0;
    for (t, members) in by_type.iter().enumerate().filter(|(_, m)| !m.is_empty()) {
        let (wn, bn) = (proj_weight(&tables[t]), proj_bias(&tables[t]));
        if !params.contains(&wn) {
            return Err(Error::invalid(format!(
                "missing projection for table '{}'",
                tables[t]
            )));
        }
        let rows = tape.gather_rows(x, members.clone())?;
        let w = tape.param(params, &wn)?;
        let b = tape.param(params, &bn)?;
        parts.push(tape.linear(rows, w, b)?);
        for &i in members {
            pos[i] = row;
            row += 1;
        }
    }
    let mut h = tape.concat_rows(&parts)?;

    let incoming = sub.incoming();
    let layers = sub.layers;
    for l in 1..=layers {
        let active: Vec<usize> = (0..n)
            .filter(|&i| (sub.hops[i] as usize) + l <= layers)
            .collect();
        let self_rows: Vec<usize> = active.iter().map(|&i| pos[i]).collect();
        let groups: Vec<Vec<usize>> = active
            .iter()
            .map(|&i| {
                let mut g: Vec<usize> = incoming[i].iter().map(|&u| pos[u]).collect();
                g.push(pos[i]);
                g.sort_unstable();
                g.dedup();
                g
            })
            .collect();
        let hs = tape.gather_rows(h, self_rows)?;
        let agg = tape.group_mean(h, &groups)?;
        let ws = tape.param(params, &conv_self(l))?;
        let wn = tape.param(params, &conv_neigh(l))?;
        let b = tape.param(params, &conv_bias(l))?;
        let a = tape.matmul(hs, ws)?;
        let m = tape.matmul(agg, wn)?;
        let sum = tape.add(a, m)?;
        h = tape.add_bias(sum, b)?;
        if l < layers {
            h = tape.relu(h);
        }
        pos.iter_mut().for_each(|p| *p = usize::MAX);
        for (r, &i) in active.iter().enumerate() {
            pos[i] = r;
        }
    }
    tape.gather_rows(h, sub.seed_local.iter().map(|&i| pos[i]).collect())
}

/// Shared linear decoder back to the input feature space.
pub fn decode_reconstruction<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    h: Var,
) -> Result<Var> {
    let w = tape.param(params, DECODER_W)?;
    let b = tape.param(params, DECODER_B)?;
    tape.linear(h, w, b)
}

/// Per-dimension standardization fitted on one or more embedding matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(mats: &[&EmbeddingMatrix]) -> Result<Self> {
        let d = mats.first().map_or(0, |m| m.dim);
        if mats.iter().any(|m| m.dim != d) {
            return Err(Error::invalid("embedding dimensions differ"));
        }
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let mut count = 0usize;
        for m in mats {
            for b in &m.blocks {
                for row in b.data.chunks_exact(d.max(1)) {
                    for (j, &v) in row.iter().enumerate() {
                        sum[j] += v as f64;
                        sq[j] += (v as f64) * (v as f64);
                    }
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::invalid("no rows to fit standardization"));
        }
        let c = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / c) as f32).collect();
        let std = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let mu = s / c;
                ((q / c - mu * mu).max(0.0).sqrt().max(1e-6)) as f32
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, m: &mut EmbeddingMatrix) {
        let d = m.dim;
        for b in &mut m.blocks {
            for row in b.data.chunks_exact_mut(d.max(1)) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - self.mean[j]) / self.std[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> SampledSubgraph {
        // local 0 is the seed; 0 <- 1 <- 2 and back
        SampledSubgraph {
            nodes: vec![0, 1, 2],
            types: vec![0, 0, 0],
            hops: vec![0, 1, 2],
            edges: vec![(1, 0), (0, 1), (2, 1)],
            seed_local: vec![0],
            layers: 2,
        }
    }

    fn scalar_params(proj: f64, ws: f64, wn: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        let m = |v: f64| Tensor::from_rows(&[&[v]]).unwrap();
        p.insert("proj.t.W", m(proj));
        p.insert("proj.t.b", Tensor::vector(vec![0.0]));
        for l in 1..=2 {
            p.insert(conv_self(l), m(ws));
            p.insert(conv_neigh(l), m(wn));
            p.insert(conv_bias(l), Tensor::vector(vec![0.0]));
        }
        p.insert(DECODER_W, m(1.0));
        p.insert(DECODER_B, Tensor::vector(vec![0.0]));
        p
    }

    fn run(p: &ParamStore<f64>, sub: &SampledSubgraph, x: &[f64]) -> Vec<f64> {
        let mut t = Tape::new();
        let xv = t.constant(Tensor::matrix(x.len(), 1, x.to_vec()).unwrap());
        let out = forward(&mut t, p, &["t".to_string()], sub, xv).unwrap();
        t.value(out).data().to_vec()
    }

    #[test]
    fn isolated_node_applies_self_weight_twice() {
        let sub = SampledSubgraph {
            nodes: vec![0],
            types: vec![0],
            hops: vec![0],
            edges: vec![],
            seed_local: vec![0],
            layers: 2,
        };
        // W_neigh = 0; ReLU is a no-op on positive values
        assert_eq!(
            run(&scalar_params(2.0, 3.0, 0.0), &sub, &[1.5]),
            vec![1.5 * 2.0 * 3.0 * 3.0]
        );
    }

    #[test]
    fn path_matches_hand_propagation() {
        // h0 = x; h1_v = h0_v + mean(N(v) ∪ v); h2_0 = h1_0 + mean(h1_0, h1_1)
        let x = [1.0, 2.0, 4.0];
        let h1_0 = 1.0 + (1.0 + 2.0) / 2.0;
        let h1_1 = 2.0 + (1.0 + 2.0 + 4.0) / 3.0;
        let expect = h1_0 + (h1_0 + h1_1) / 2.0;
        let got = run(&scalar_params(1.0, 1.0, 1.0), &path3(), &x);
        assert!((got[0] - expect).abs() < 1e-12, "{got:?} vs {expect}");
    }

    #[test]
    fn symmetric_nodes_get_identical_outputs() {
        let sub = SampledSubgraph {
            nodes: vec![0, 1],
            types: vec![0, 0],
            hops: vec![0, 0],
            edges: vec![(1, 0), (0, 1)],
            seed_local: vec![0, 1],
            layers: 2,
        };
        let out = run(&scalar_params(0.7, -0.4, 1.3), &sub, &[0.5, 0.5]);
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn decoder_examples() {
        let mut p = ParamStore::<f64>::new();
        p.insert(
            DECODER_W,
            Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(),
        );
        p.insert(DECODER_B, Tensor::vector(vec![0.0, 0.0]));
        let mut t = Tape::new();
        let h = t.constant(Tensor::from_rows(&[&[0.3, -2.0], &[0.0, 0.0]]).unwrap());
        let out = decode_reconstruction(&mut t, &p, h).unwrap();
        assert_eq!(t.value(out).data(), &[0.3, -2.0, 0.0, 0.0]);
        let wide = t.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap());
        assert!(decode_reconstruction(&mut t, &p, wide).is_err());
    }

    #[test]
    fn missing_projection_is_reported() {
        let p = scalar_params(1.0, 1.0, 1.0);
        let mut sub = path3();
        sub.types = vec![0, 1, 0];
        let mut t = Tape::new();
        let xv = t.constant(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
        let err = forward(&mut t, &p, &["t".to_string(), "u".to_string()], &sub, xv).unwrap_err();
        assert!(err.to_string().contains("missing projection"), "{err}");
    }
}
