use unittab_core::model::Model;
use unittab_core::rng::seeded;
use unittab_core::verify::{toy_model_config, toy_schema};
use unittab_core::{Tape, Tensor};

/// Gauss-Jordan inverse with partial pivoting of a row-major `n × n` matrix.
fn invert(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| m[x * n + c].abs().total_cmp(&m[y * n + c].abs()))
            .unwrap();
        for j in 0..n {
            m.swap(c * n + j, p * n + j);
            inv.swap(c * n + j, p * n + j);
        }
        let d = m[c * n + c];
        assert!(d.abs() > 1e-9, "singular");
        for j in 0..n {
            m[c * n + j] /= d;
            inv[c * n + j] /= d;
        }
        for r in (0..n).filter(|&r| r != c) {
            let f = m[r * n + c];
            for j in 0..n {
                m[r * n + j] -= f * m[c * n + j];
                inv[r * n + j] -= f * inv[c * n + j];
            }
        }
    }
    inv
}

#[test]
fn inverse_output_projection_round_trips_rows() {
    let schema = toy_schema().unwrap();
    let mut rng = seeded(11);
    for type_id in [1u32, 2] {
        let mut config = toy_model_config();
        let k = unittab_core::embedding::FieldLayout::new(&schema, config.numeric_input, config.binned_table_size())
            .unwrap()
            .arity(type_id)
            .unwrap();
        config.m = k * config.d;
        let mut model = Model::new(config.clone(), &schema, &mut rng).unwrap();
        let n = config.m;
        let w = Tensor::randn(&[n, n], 1.0, &mut rng);
        let w_inv = Tensor::matrix(n, n, invert(w.data(), n)).unwrap();
        let (w_in, w_out) = model.row_projection(type_id).unwrap();
        model.store.set(w_in, w).unwrap();
        model.store.set(w_out, w_inv).unwrap();

        let x = Tensor::randn(&[3, k, config.d], 1.0, &mut rng);
        let mut tape = Tape::with_params(&model.store);
        let xv = tape.constant(x.clone());
        let z = model.project_rows(&mut tape, xv, type_id).unwrap();
        let back = model.unproject_rows(&mut tape, z, type_id).unwrap();
        let got = tape.value(back);
        assert_eq!(got.shape(), x.shape());
        let err = got
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "type {type_id}: {err}");
    }
}
