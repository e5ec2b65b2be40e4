mod common;

use std::path::Path;
use std::sync::Arc;

use proptest::prelude::*;
use tumor_control::config::{FieldSpec, Term};
use tumor_control::io::{decode_snapshot, encode_snapshot};
use tumor_control::linalg::{reverse_cuthill_mckee, BandedLu, CsrMatrix, GmresOptions, LinearSystem};
use tumor_control::optimize::{project_box, stationarity_residual};
use tumor_control::*;

const CELLS: usize = 6;
const STEPS: usize = 3;

fn grid() -> Arc<Grid> {
    Arc::new(Grid::line(CELLS, 1.0).unwrap())
}

fn control(values: &[f64]) -> ControlTrajectory {
    let g = grid();
    let fields = values.chunks(CELLS).map(|c| Field::from_values(&g, c.to_vec()).unwrap()).collect();
    ControlTrajectory::new(0.1, fields).unwrap()
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, CELLS * STEPS)
}

fn boxes() -> impl Strategy<Value = ControlBox> {
    (-2.0f64..0.0, 0.0f64..2.0, prop::collection::vec(-0.5f64..0.5, CELLS)).prop_map(|(lo, hi, wiggle)| {
        let g = grid();
        let lower = Field::from_values(&g, wiggle.iter().map(|w| lo + w.min(0.0)).collect()).unwrap();
        ControlBox {
            lower: Profile::Field(lower),
            upper: Profile::Constant(hi),
        }
    })
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_nonexpansive(a in values(), b in values(), bounds in boxes()) {
        let (u, v) = (control(&a), control(&b));
        let pu = project_box(&u, &bounds);
        prop_assert!(bounds.contains(&pu));
        prop_assert_eq!(&project_box(&pu, &bounds), &pu);
        let pv = project_box(&v, &bounds);
        let lhs = pu.axpy(-1.0, &pv).unwrap().norm();
        let rhs = u.axpy(-1.0, &v).unwrap().norm();
        prop_assert!(lhs <= rhs * (1.0 + 1e-14));
    }

    #[test]
    fn projection_characterised_by_obtuse_angle(a in values(), b in values(), bounds in boxes()) {
        // ⟨u − Pu, v − Pu⟩ ≤ 0 for every admissible v
        let u = control(&a);
        let pu = project_box(&u, &bounds);
        let v = project_box(&control(&b), &bounds);
        let pairing = u.axpy(-1.0, &pu).unwrap().inner(&v.axpy(-1.0, &pu).unwrap()).unwrap();
        prop_assert!(pairing <= 1e-12);
    }

    #[test]
    fn control_inner_product_is_symmetric_bilinear(a in values(), b in values(), c in values(), s in -3.0f64..3.0) {
        let (u, v, w) = (control(&a), control(&b), control(&c));
        let uv = u.inner(&v).unwrap();
        prop_assert!((uv - v.inner(&u).unwrap()).abs() <= 1e-12);
        let lhs = u.axpy(s, &w).unwrap().inner(&v).unwrap();
        let rhs = uv + s * w.inner(&v).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
        prop_assert!((u.inner(&u).unwrap() - u.norm().powi(2)).abs() <= 1e-12 * (1.0 + u.norm().powi(2)));
        prop_assert!(uv.abs() <= u.norm() * v.norm() * (1.0 + 1e-12));
    }

    #[test]
    fn stationarity_vanishes_exactly_at_fixed_points(a in values(), g in values(), bounds in boxes()) {
        let u = project_box(&control(&a), &bounds);
        let g = control(&g);
        let r = stationarity_residual(&u, &g, &bounds).unwrap();
        let fixed = project_box(&u.axpy(-1.0, &g).unwrap(), &bounds) == u;
        prop_assert_eq!(r == 0.0, fixed);
        // the lower vertex is stationary for a nonnegative gradient
        let lower = bounds.vertex(&u, |_, _| false);
        let g_pos = g.map(f64::abs);
        prop_assert_eq!(stationarity_residual(&lower, &g_pos, &bounds).unwrap(), 0.0);
    }

    #[test]
    fn neumann_laplacian_conserves_mass(v in prop::collection::vec(-5.0f64..5.0, 4 * 5), lx in 0.2f64..3.0, ly in 0.2f64..3.0) {
        let g = Arc::new(Grid::new(2, &[4, 5], &[lx, ly]).unwrap());
        let f = Field::from_values(&g, v).unwrap();
        let total = f.laplacian().integral();
        prop_assert!(total.abs() <= 1e-10 * (1.0 + f.max_abs() / g.spacing()[0].min(g.spacing()[1]).powi(2)));
        // −Δ is positive semidefinite
        prop_assert!(-f.inner(&f.laplacian()).unwrap() >= -1e-10);
    }

    #[test]
    fn snapshot_encoding_round_trips(dims in 1usize..=3, seed in prop::collection::vec(-1e6f64..1e6, 24), count in 1usize..3) {
        let n = [2usize, 3, 4];
        let g = Arc::new(Grid::new(dims, &n[..dims], &[1.5, 0.25, 2.0][..dims]).unwrap());
        let fields: Vec<Field> = (0..count)
            .map(|k| Field::from_values(&g, (0..g.len()).map(|i| seed[(i + k) % seed.len()]).collect()).unwrap())
            .collect();
        let refs: Vec<&Field> = fields.iter().collect();
        let bytes = encode_snapshot(&g, &refs).unwrap();
        let snap = decode_snapshot(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(snap.grid.as_ref(), g.as_ref());
        prop_assert_eq!(snap.fields, fields);
    }

    #[test]
    fn field_specs_round_trip(
        c in -10.0f64..10.0,
        amp in -2.0f64..2.0,
        rate in -3.0f64..3.0,
        modes in prop::collection::vec(0u32..6, 0..3),
        idx in 0usize..4,
    ) {
        let spec = FieldSpec {
            terms: vec![
                Term::Constant(c),
                Term::Cosine { amp, modes: modes.clone() },
                Term::Ramp { amp, rate, modes },
                Term::File { path: "dir/x.chcf".into(), index: idx },
            ],
        };
        prop_assert_eq!(spec.to_string().parse::<FieldSpec>().unwrap(), spec);
    }

    #[test]
    fn banded_solver_matches_product(
        n in 5usize..40,
        links in prop::collection::vec((0usize..40, 0usize..40, -1.0f64..1.0), 0..80),
        x in prop::collection::vec(-2.0f64..2.0, 40),
    ) {
        // random sparse pattern made diagonally dominant
        let mut t: Vec<(usize, usize, f64)> = links.iter().map(|&(i, j, v)| (i % n, j % n, v)).collect();
        let mut row_sum = vec![0.0; n];
        for &(i, _, v) in &t {
            row_sum[i] += f64::abs(v);
        }
        for (i, s) in row_sum.iter().enumerate() {
            t.push((i, i, 1.0 + 2.0 * s));
        }
        let a = CsrMatrix::from_triplets(n, t);
        let perm = reverse_cuthill_mckee(&a);
        let mut seen = perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let x = &x[..n];
        let mut b = vec![0.0; n];
        a.matvec(x, &mut b);
        let lu = BandedLu::new(&a, perm).unwrap();
        let y = lu.solve(&b);
        let err = y.iter().zip(x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-12, "err {err:e}");
        let krylov = LinearSystem::new(a, GmresOptions { direct_work_limit: 0.0, ..Default::default() }).unwrap();
        let (z, _) = krylov.solve(&b).unwrap();
        let err = z.iter().zip(x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-9, "gmres err {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn mass_balance_holds_for_random_controls(a in prop::collection::vec(-1.0f64..1.0, 3)) {
        let p = common::small(16, 10);
        let u = ControlTrajectory::from_fn(&p.grid, p.nt(), p.dt(), |x, t| {
            a[0] + a[1] * (std::f64::consts::PI * x[0]).cos() + a[2] * t
        });
        let traj = p.solve_state(&u).unwrap();
        let ledger = tumor_control::state::mass_ledger(&traj, &u);
        prop_assert!(ledger.max_residual() <= 1e-10, "{:e}", ledger.max_residual());
        let sep = tumor_control::state::separation_report(&traj, &p.params.potential);
        prop_assert!(sep.margin > 0.0);
    }

    #[test]
    fn cost_is_nonnegative_and_differences_agree(a in prop::collection::vec(-1.0f64..1.0, 2)) {
        let p = common::small(16, 10);
        let ua = ControlTrajectory::constant(&p.grid, p.nt(), p.dt(), a[0]);
        let ub = ControlTrajectory::constant(&p.grid, p.nt(), p.dt(), a[1]);
        let (ta, tb) = (p.solve_state(&ua).unwrap(), p.solve_state(&ub).unwrap());
        let ja = tumor_control::optimize::evaluate_cost(&ta, &ua, &p.cost).unwrap();
        let jb = tumor_control::optimize::evaluate_cost(&tb, &ub, &p.cost).unwrap();
        prop_assert!(ja.terms.iter().all(|&t| t >= 0.0));
        let d = tumor_control::optimize::cost_difference(&ta, &ua, &tb, &ub, &p.cost).unwrap();
        prop_assert!((d - (ja.total() - jb.total())).abs() <= 1e-14 * (1.0 + ja.total()));
    }
}
