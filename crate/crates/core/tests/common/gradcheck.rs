//! Reverse-mode vs. central finite differences for every graph operation.

use meshdraft::tensor::{Graph, Tensor, Var};

use super::oracle::{self, to64};
use super::{rand_tensor, rng};

pub struct OpCheck {
    pub name: String,
    pub rel_err: f64,
}

type RefFn = dyn Fn(&[Vec<f64>]) -> Vec<f64>;

/// Checks d(Σ w·op(x))/dx for each input against an f64 oracle.
fn check<'a>(
    name: &str,
    inputs: Vec<Tensor>,
    w: Option<Tensor>,
    build: &dyn Fn(&mut Graph<'a>, &[Var]) -> Var,
    reference: &RefFn,
) -> Vec<OpCheck> {
    let mut g: Graph<'a> = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = build(&mut g, &vars);
    let out_shape = g.value(y).shape().to_vec();
    let w = w.unwrap_or_else(|| {
        let mut r = rng(0xfeed);
        rand_tensor(&mut r, &out_shape, 1.0)
    });
    let wv = g.input(w.clone());
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    let xs64: Vec<Vec<f64>> = inputs.iter().map(|t| to64(t.data())).collect();
    let w64 = to64(w.data());
    let mut out = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let mut f = |xi: &[f64]| {
            let mut all = xs64.clone();
            all[i] = xi.to_vec();
            reference(&all).iter().zip(&w64).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = oracle::numeric_grad(&xs64[i], 1e-5, &mut f);
        let ad = grads.wrt(*v).expect("gradient for input");
        out.push(OpCheck {
            name: format!("{name}[input {i}]"),
            rel_err: oracle::rel_err(ad.data(), &fd),
        });
    }
    out
}

pub fn all_op_checks() -> Vec<OpCheck> {
    let mut r = rng(11);
    let mut out = Vec::new();

    // matmul: gradient of sum of outputs
    let a = rand_tensor(&mut r, &[3, 4], 1.0);
    let b = rand_tensor(&mut r, &[4, 2], 1.0);
    out.extend(check(
        "matmul(sum)",
        vec![a.clone(), b.clone()],
        Some(Tensor::full(&[3, 2], 1.0)),
        &|g, v| g.matmul(v[0], v[1]).unwrap(),
        &|x| oracle::matmul(&x[0], 3, 4, &x[1], 2),
    ));
    out.extend(check(
        "matmul",
        vec![a, b],
        None,
        &|g, v| g.matmul(v[0], v[1]).unwrap(),
        &|x| oracle::matmul(&x[0], 3, 4, &x[1], 2),
    ));

    let x = rand_tensor(&mut r, &[3, 5], 1.0);
    let row = rand_tensor(&mut r, &[5], 1.0);
    out.extend(check(
        "add_row",
        vec![x, row],
        None,
        &|g, v| g.add_row(v[0], v[1]).unwrap(),
        &|x| {
            let mut y = x[0].clone();
            oracle::add_row(&mut y, &x[1]);
            y
        },
    ));

    let p = rand_tensor(&mut r, &[4, 3], 1.0);
    let q = rand_tensor(&mut r, &[4, 3], 1.0);
    out.extend(check(
        "add",
        vec![p.clone(), q.clone()],
        None,
        &|g, v| g.add(v[0], v[1]).unwrap(),
        &|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect(),
    ));
    out.extend(check(
        "mul",
        vec![p.clone(), q],
        None,
        &|g, v| g.mul(v[0], v[1]).unwrap(),
        &|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect(),
    ));
    out.extend(check(
        "scale",
        vec![p],
        None,
        &|g, v| g.scale(v[0], -0.7).unwrap(),
        &|x| x[0].iter().map(|a| a * -0.7f32 as f64).collect(),
    ));

    let x = rand_tensor(&mut r, &[3, 4], 2.0);
    out.extend(check(
        "gelu",
        vec![x],
        None,
        &|g, v| g.gelu(v[0]).unwrap(),
        &|x| x[0].iter().map(|&a| oracle::gelu(a)).collect(),
    ));

    let x = rand_tensor(&mut r, &[3, 5], 2.0);
    out.extend(check(
        "softmax",
        vec![x],
        None,
        &|g, v| g.softmax(v[0]).unwrap(),
        &|x| oracle::softmax_rows(&x[0], 5),
    ));

    let x = rand_tensor(&mut r, &[3, 6], 2.0);
    let gain = rand_tensor(&mut r, &[6], 1.5);
    let bias = rand_tensor(&mut r, &[6], 1.0);
    out.extend(check(
        "layer_norm",
        vec![x, gain, bias],
        None,
        &|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(),
        &|x| oracle::layer_norm(&x[0], 6, &x[1], &x[2]),
    ));

    // causal self-attention, 2 heads, no cache
    let q = rand_tensor(&mut r, &[4, 8], 1.0);
    let k = rand_tensor(&mut r, &[4, 8], 1.0);
    let v = rand_tensor(&mut r, &[4, 8], 1.0);
    out.extend(check(
        "attention(causal)",
        vec![q.clone(), k.clone(), v.clone()],
        None,
        &|g, x| g.attention(x[0], x[1], x[2], 2, true, None).unwrap(),
        &|x| oracle::attention(&x[0], 4, &x[1], &x[2], 4, 0, 8, 2, true),
    ));

    // causal attention over cached rows plus a 2-row window
    let past_k = rand_tensor(&mut r, &[3, 8], 1.0);
    let past_v = rand_tensor(&mut r, &[3, 8], 1.0);
    let qw = rand_tensor(&mut r, &[2, 8], 1.0);
    let kw = rand_tensor(&mut r, &[2, 8], 1.0);
    let vw = rand_tensor(&mut r, &[2, 8], 1.0);
    {
        let pk64 = to64(past_k.data());
        let pv64 = to64(past_v.data());
        out.extend(check(
            "attention(cached)",
            vec![qw, kw, vw],
            None,
            &|g, x| g.attention(x[0], x[1], x[2], 2, true, Some((&past_k, &past_v))).unwrap(),
            &move |x| {
                let mut keys = pk64.clone();
                keys.extend_from_slice(&x[1]);
                let mut vals = pv64.clone();
                vals.extend_from_slice(&x[2]);
                oracle::attention(&x[0], 2, &keys, &vals, 5, 3, 8, 2, true)
            },
        ));
    }

    // cross-attention: 3 queries over 5 memory rows, one head
    let q = rand_tensor(&mut r, &[3, 8], 1.0);
    let k = rand_tensor(&mut r, &[5, 8], 1.0);
    let v = rand_tensor(&mut r, &[5, 8], 1.0);
    out.extend(check(
        "attention(cross)",
        vec![q, k, v],
        None,
        &|g, x| g.attention(x[0], x[1], x[2], 1, false, None).unwrap(),
        &|x| oracle::attention(&x[0], 3, &x[1], &x[2], 5, 0, 8, 1, false),
    ));

    let table = rand_tensor(&mut r, &[6, 4], 1.0);
    let ids = [0usize, 3, 3, 5];
    out.extend(check(
        "gather",
        vec![table],
        None,
        &move |g, x| g.gather(x[0], &ids).unwrap(),
        &move |x| ids.iter().flat_map(|&i| x[0][i * 4..(i + 1) * 4].to_vec()).collect(),
    ));

    let logits = rand_tensor(&mut r, &[4, 7], 3.0);
    let labels = vec![Some(1u32), None, Some(6), Some(0)];
    {
        let l1 = labels.clone();
        let l2 = labels;
        out.extend(check(
            "cross_entropy",
            vec![logits],
            Some(Tensor::scalar(1.0)),
            &move |g, x| g.cross_entropy(x[0], &l1, 0.25).unwrap(),
            &move |x| vec![0.25f32 as f64 * oracle::cross_entropy(&x[0], 7, &l2)],
        ));
    }

    let s1 = rand_tensor(&mut r, &[3, 3], 1.0);
    out.extend(check(
        "sum",
        vec![s1],
        Some(Tensor::scalar(1.0)),
        &|g, x| g.sum(x[0]).unwrap(),
        &|x| vec![x[0].iter().sum()],
    ));
    let a = Tensor::scalar(0.3);
    let b = Tensor::scalar(-1.2);
    out.extend(check(
        "weighted_sum",
        vec![a, b],
        Some(Tensor::scalar(1.0)),
        &|g, x| g.weighted_sum(&[(x[0], 0.8), (x[1], 0.64)]).unwrap(),
        &|x| vec![0.8f32 as f64 * x[0][0] + 0.64f32 as f64 * x[1][0]],
    ));
    out
}
