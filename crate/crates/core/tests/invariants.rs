mod common;

use common::*;
use ensnse::assembly::Assembler;
use ensnse::ensemble::{EnsembleStepper, MemberSpec};
use ensnse::fe::TaylorHood;
use ensnse::mesh::{gen_offset_annulus, gen_unit_square};
use ensnse::scenarios::green_taylor_member;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn square(n: usize) -> Assembler {
    Assembler::new(TaylorHood::new(gen_unit_square(n).unwrap()))
}

fn gt_members(params: &[(f64, f64)]) -> Vec<MemberSpec> {
    params
        .iter()
        .map(|&(eps, nu)| green_taylor_member(eps, nu).unwrap().member())
        .collect()
}

#[test]
fn convection_matrix_is_skew() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for asm in [
        square(6),
        Assembler::new(TaylorHood::new(gen_offset_annulus(24, 16, 4, 0.8).unwrap())),
    ] {
        let w: Vec<f64> = (0..asm.space().n_velocity())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let n = asm.assemble_convection(&w).unwrap();
        let sum = n.combine(1.0, &n.transpose(), 1.0);
        assert!(
            sum.max_abs() <= 1e-13 * n.max_abs(),
            "{} vs {}",
            sum.max_abs(),
            n.max_abs()
        );
    }
}

#[test]
fn fluctuations_cancel_and_velocity_stays_discretely_solenoidal() {
    for j in [1, 2, 5] {
        let params: Vec<(f64, f64)> = (0..j)
            .map(|k| (1e-2 * k as f64, 0.1 + 0.02 * k as f64))
            .collect();
        let mut st = EnsembleStepper::new(square(6), gt_members(&params), 0.05).unwrap();
        for n in 1..=6 {
            let r = st.advance().unwrap();
            assert_eq!(st.factorization_count(), n);
            for m in &r.members {
                assert!(m.divergence_residual <= 1e-8, "{}", m.divergence_residual);
            }
            let fl = st.state().fluctuations().unwrap();
            let scale = st
                .state()
                .current
                .iter()
                .map(|u| max_abs(u))
                .fold(0.0, f64::max);
            for i in 0..fl[0].len() {
                let s: f64 = fl.iter().map(|f| f[i]).sum();
                assert!(s.abs() <= 1e-14 * scale.max(1.0), "sum {s} at dof {i}");
            }
        }
    }
}

#[test]
fn single_member_matches_independent_stepper() {
    let member = green_taylor_member(0.0, 0.05).unwrap().member();
    let (dt, steps) = (0.05, 12);
    let reference = reference_bdf2(&square(8), &member, dt, steps);
    let mut st = EnsembleStepper::new(square(8), vec![member], dt).unwrap();
    for k in 1..=steps {
        st.advance().unwrap();
        let u = &st.state().current[0];
        let err = max_abs_diff(u, &reference[k]);
        assert!(
            err <= 1e-12 * max_abs(&reference[k]).max(1.0),
            "step {k}: {err:e}"
        );
    }
}

#[test]
fn member_order_does_not_change_any_bit() {
    let params = [(1e-3, 0.2), (-2e-3, 0.25), (5e-3, 0.3)];
    let mut a = EnsembleStepper::new(square(5), gt_members(&params), 0.1).unwrap();
    let perm = [2, 0, 1];
    let permuted: Vec<_> = perm.iter().map(|&k| params[k]).collect();
    let mut b = EnsembleStepper::new(square(5), gt_members(&permuted), 0.1).unwrap();
    for _ in 0..5 {
        a.advance().unwrap();
        b.advance().unwrap();
    }
    for (k, &src) in perm.iter().enumerate() {
        let (x, y) = (&b.state().current[k], &a.state().current[src]);
        assert!(x
            .iter()
            .zip(y.iter())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn green_taylor_data_solves_the_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (eps, nu) in [(1e-3, 0.2), (-1e-3, 0.3)] {
        let m = green_taylor_member(eps, nu).unwrap();
        for _ in 0..100 {
            let p = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ];
            let (r, div) = green_taylor_residual(&m, p);
            assert!(r[0].abs().max(r[1].abs()) <= 1e-10, "{r:?} at {p:?}");
            assert!(div.abs() <= 1e-12);
        }
    }
}

#[test]
fn polynomial_flow_is_reproduced() {
    let (dt, nus) = (0.1, [0.2, 0.3]);
    let nu_bar = 0.25;
    let members: Vec<_> = nus
        .iter()
        .map(|&nu| polynomial_member(nu, nu_bar, dt))
        .collect();
    let mut st = EnsembleStepper::new(square(4), members, dt).unwrap();
    let space = st.space().clone();
    let interp = |t: f64| {
        space
            .interpolate_velocity(|x| [phi(t) * x[0] * x[0], -2.0 * phi(t) * x[0] * x[1]])
            .into_values()
    };
    st.set_history(vec![interp(0.0); 2], vec![interp(dt); 2], 1)
        .unwrap();
    for n in 2..=8 {
        st.advance().unwrap();
        let t = n as f64 * dt;
        let exact_p = space
            .interpolate_pressure(|x| polynomial_pressure(x, t))
            .into_values();
        for j in 0..2 {
            let eu = max_abs_diff(&st.state().current[j], &interp(t));
            let ep = max_abs_diff(&st.state().pressure[j], &exact_p);
            assert!(
                eu <= 1e-11 && ep <= 1e-10,
                "step {n} member {j}: {eu:e} {ep:e}"
            );
        }
    }
}
