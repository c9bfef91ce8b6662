use drnm_core::world::*;
use drnm_core::triplet::mix;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn raw_oracle(intr: &CameraIntrinsics, a: &Pose, b: &Pose) -> Matrix3<f64> {
    let ra = a.rotation_world_to_camera();
    let rb = b.rotation_world_to_camera();
    let r = rb * ra.transpose();
    let t = rb * (a.camera_center() - b.camera_center());
    let tx = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
    let f = intr.k_inverse().transpose() * tx * r * intr.k_inverse();
    f / f.norm()
}

#[test]
fn probe_raw_vs_svd() {
    let intr = CameraIntrinsics::default_224();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut max_err_raw: f64 = 0.0;
    let mut max_err_svd: f64 = 0.0;
    let mut n = 0;
    for draw in 0..200u64 {
        let scene = Scene::random(mix(101, draw), 300, Scene::default_bounds());
        let mk = |rng: &mut ChaCha8Rng| Pose::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.25..0.25));
        let (past, fut, goal) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        if (past.camera_center() - goal.camera_center()).norm() < 1e-3 { continue; }
        if (fut.camera_center() - goal.camera_center()).norm() < 1e-3 { continue; }
        let f_pg_raw = raw_oracle(&intr, &past, &goal);
        let f_fg_raw = raw_oracle(&intr, &fut, &goal);
        let f_pg_svd = oracle_fundamental(&intr, &past, &goal).unwrap();
        let f_fg_svd = oracle_fundamental(&intr, &fut, &goal).unwrap();
        for p in scene.points() {
            let (xp, vp) = project(&intr, &past, &p.position);
            let (xf, vf) = project(&intr, &fut, &p.position);
            let (xg, vg) = project(&intr, &goal, &p.position);
            if !(vp && vf && vg) { continue; }
            let check = |fpg: &Matrix3<f64>, ffg: &Matrix3<f64>| -> Option<f64> {
                let lp = fpg * Vector3::new(xp.x, xp.y, 1.0);
                let lf = ffg * Vector3::new(xf.x, xf.y, 1.0);
                let sin = (lp.x * lf.y - lp.y * lf.x).abs()
                    / ((lp.x*lp.x+lp.y*lp.y).sqrt() * (lf.x*lf.x+lf.y*lf.y).sqrt());
                if sin < 0.05 { return None; }
                let z = lp.cross(&lf);
                if z.z.abs() < 1e-12 { return None; }
                Some((((z.x/z.z) - xg.x).powi(2) + ((z.y/z.z) - xg.y).powi(2)).sqrt())
            };
            if let (Some(er), Some(es)) = (check(&f_pg_raw, &f_fg_raw), check(f_pg_svd.matrix(), f_fg_svd.matrix())) {
                max_err_raw = max_err_raw.max(er);
                max_err_svd = max_err_svd.max(es);
                n += 1;
            }
        }
    }
    println!("checked {n}: max_err raw={max_err_raw:.3e} svd={max_err_svd:.3e}");
}
