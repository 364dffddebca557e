use scalar_core::numerics::gradcheck::{self, GraphFn};
use scalar_core::numerics::{Array, Graph, Scalar, Var};
use scalar_core::Result;

#[test]
fn every_op_matches_finite_differences_f64() {
    let cases = gradcheck::op_catalog(11);
    for case in &cases {
        let r = gradcheck::check::<f64>(case, &case.inputs, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-6, "{} {:?}: {}", case.name, case.kind, r.max_rel_err);
    }
}

#[test]
fn every_op_matches_finite_differences_f32() {
    let cases = gradcheck::op_catalog(12);
    for case in &cases {
        let r = gradcheck::check::<f32>(case, &case.inputs, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-4, "{} {:?}: {}", case.name, case.kind, r.max_rel_err);
    }
}

/// Two-layer perceptron: `mean((gelu(x W1 + b1) W2 + b2)^2)`.
struct Mlp;

impl GraphFn for Mlp {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var> {
        let h = g.linear(v[0], v[1], Some(v[2]))?;
        let h = g.gelu(h);
        let y = g.linear(h, v[3], Some(v[4]))?;
        let sq = g.mul(y, y)?;
        Ok(g.mean(sq))
    }
}

#[test]
fn random_mlp_f64_within_1e5() {
    let mut k = 0u32;
    let mut rnd = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        Array::new(
            shape.to_vec(),
            (0..n)
                .map(|_| {
                    k += 1;
                    ((k as f64) * 12.9898).sin() * 0.9
                })
                .collect(),
        )
        .unwrap()
    };
    let inputs = vec![rnd(&[4, 5]), rnd(&[5, 8]), rnd(&[8]), rnd(&[8, 3]), rnd(&[3])];
    let r = gradcheck::check::<f64>(&Mlp, &inputs, 1e-4).unwrap();
    assert!(r.max_rel_err < 1e-5, "{}", r.max_rel_err);
}
