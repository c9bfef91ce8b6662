use drnm_core::geometry::*;
use drnm_core::world::*;

#[test]
fn probe_clean_fit() {
    let intr = CameraIntrinsics::default_224();
    let scene = Scene::random(202, 700, Scene::default_bounds());
    let pose_a = Pose::origin();
    let pose_b = Pose::new(0.5, 0.15, 0.07);
    let sampled = sample_correspondences(&scene, &intr, &pose_a, &pose_b, 0.0, 0.3, 1000).unwrap();
    let mut corrs = Vec::new();
    let mut truth = Vec::new();
    let (mut il, mut ol) = (35, 15);
    for (c, &o) in sampled.correspondences.iter().zip(&sampled.outlier_mask) {
        if o && ol > 0 { ol -= 1; } else if !o && il > 0 { il -= 1; } else { continue; }
        truth.push(!o);
        corrs.push(*c);
    }
    // Fit on the first 8 labeled inliers.
    let clean8: Vec<Correspondence> = corrs.iter().zip(&truth).filter(|(_, &t)| t).map(|(c, _)| *c).take(8).collect();
    match estimate_fundamental_8pt(&clean8) {
        Ok(f) => {
            let mut within = 0;
            let mut max_inlier_se: f64 = 0.0;
            let mut min_outlier_se = f64::INFINITY;
            for (c, &t) in corrs.iter().zip(&truth) {
                let se = sampson_error(&f, &HomoPoint2::from_point(&c.a), &HomoPoint2::from_point(&c.b)).unwrap();
                if t { max_inlier_se = max_inlier_se.max(se); if se <= 9.0 { within += 1; } }
                else { min_outlier_se = min_outlier_se.min(se); if se <= 9.0 { within += 1; } }
            }
            println!("clean-8 fit: within={within} max_inlier_se={max_inlier_se:.3e} min_outlier_se={min_outlier_se:.3e}");
        }
        Err(e) => println!("clean-8 fit FAILED: {e}"),
    }
    // Fit on all 35 inliers.
    let clean35: Vec<Correspondence> = corrs.iter().zip(&truth).filter(|(_, &t)| t).map(|(c, _)| *c).collect();
    match estimate_fundamental_8pt(&clean35) {
        Ok(f) => {
            let mut within = 0;
            for (c, _) in corrs.iter().zip(&truth) {
                let se = sampson_error(&f, &HomoPoint2::from_point(&c.a), &HomoPoint2::from_point(&c.b)).unwrap();
                if se <= 9.0 { within += 1; }
            }
            println!("clean-35 fit: within={within}");
        }
        Err(e) => println!("clean-35 fit FAILED: {e}"),
    }
}

#[test]
fn probe_winner_structure() {
    let intr = CameraIntrinsics::default_224();
    let scene = Scene::random(202, 700, Scene::default_bounds());
    let pose_a = Pose::origin();
    let pose_b = Pose::new(0.5, 0.15, 0.07);
    let sampled = sample_correspondences(&scene, &intr, &pose_a, &pose_b, 0.0, 0.3, 1000).unwrap();
    let mut corrs = Vec::new();
    let mut truth = Vec::new();
    let (mut il, mut ol) = (35, 15);
    for (c, &o) in sampled.correspondences.iter().zip(&sampled.outlier_mask) {
        if o && ol > 0 { ol -= 1; } else if !o && il > 0 { il -= 1; } else { continue; }
        truth.push(!o);
        corrs.push(*c);
    }
    let result = ransac_fundamental(&corrs, 3.0, 2000, 0);
    let f = result.f.unwrap();
    let sv = f.matrix().singular_values();
    println!("winner singular values: {:.3e} {:.3e} {:.3e}", sv[0], sv[1], sv[2]);
    // SE and point-line distance of the captured outliers under the winner.
    for (i, &t) in truth.iter().enumerate() {
        if !t && result.inliers.contains(&i) {
            let x = HomoPoint2::from_point(&corrs[i].a);
            let xp = HomoPoint2::from_point(&corrs[i].b);
            let se = sampson_error(&f, &x, &xp).unwrap();
            let l = project_epipolar_line(&f, &x).unwrap();
            let d = point_line_distance(&l, &xp).unwrap();
            println!("  captured outlier {i}: SE={se:.3e} dist={d:.3}px");
        }
    }
    // Where is the second epipole? Null vector of F^T (epipole in view B).
    let svd = f.matrix().svd(true, true);
    let u = svd.u.unwrap();
    let e2 = u.column(2);
    println!("epipole B (homog): {:.3} {:.3} {:.3} -> pixel ({:.1}, {:.1})", e2[0], e2[1], e2[2], e2[0]/e2[2], e2[1]/e2[2]);
}

#[test]
fn probe_oracle_spectrum() {
    let intr = CameraIntrinsics::default_224();
    let mut worst: f64 = f64::INFINITY;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let a = Pose::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.3..0.3));
        let b = Pose::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.3..0.3));
        if (a.camera_center() - b.camera_center()).norm() < 0.05 { continue; }
        let f = oracle_fundamental(&intr, &a, &b).unwrap();
        let sv = f.matrix().singular_values();
        worst = worst.min(sv[1] / sv[0]);
    }
    println!("min oracle sigma2/sigma1 over 500 pose pairs: {worst:.3e}");
}

#[test]
fn probe_capture_mechanism() {
    let intr = CameraIntrinsics::default_224();
    let scene = Scene::random(202, 700, Scene::default_bounds());
    let pose_a = Pose::origin();
    let pose_b = Pose::new(0.5, 0.15, 0.07);
    let oracle = oracle_fundamental(&intr, &pose_a, &pose_b).unwrap();
    let svd_o = oracle.matrix().svd(true, true);
    let uo = svd_o.u.unwrap();
    let eo = uo.column(2);
    println!("oracle epipole B: ({:.1}, {:.1})  sv ratio {:.3e}", eo[0]/eo[2], eo[1]/eo[2],
        {let s = oracle.matrix().singular_values(); s[1]/s[0]});
    let sampled = sample_correspondences(&scene, &intr, &pose_a, &pose_b, 0.0, 0.3, 1000).unwrap();
    let mut corrs = Vec::new();
    let mut truth = Vec::new();
    let (mut il, mut ol) = (35, 15);
    for (c, &o) in sampled.correspondences.iter().zip(&sampled.outlier_mask) {
        if o && ol > 0 { ol -= 1; } else if !o && il > 0 { il -= 1; } else { continue; }
        truth.push(!o);
        corrs.push(*c);
    }
    let result = ransac_fundamental(&corrs, 3.0, 2000, 0);
    let f = result.f.unwrap();
    let ex = eo[0]/eo[2]; let ey = eo[1]/eo[2];
    let mut max_inlier_se: f64 = 0.0;
    for (i, &t) in truth.iter().enumerate() {
        let x = HomoPoint2::from_point(&corrs[i].a);
        let xp = HomoPoint2::from_point(&corrs[i].b);
        let se = sampson_error(&f, &x, &xp).unwrap();
        if t && result.inliers.contains(&i) { max_inlier_se = max_inlier_se.max(se); }
        if !t && result.inliers.contains(&i) {
            let d_epi = ((corrs[i].b.x - ex).powi(2) + (corrs[i].b.y - ey).powi(2)).sqrt();
            println!("  captured outlier {i}: pB=({:.0},{:.0}) dist to oracle epipole {:.0}px SE={se:.2}", corrs[i].b.x, corrs[i].b.y, d_epi);
        }
    }
    println!("max retained-inlier SE: {max_inlier_se:.3e}");
}

#[test]
fn probe_pose_conditioning() {
    let intr = CameraIntrinsics::default_224();
    let scene = Scene::random(202, 700, Scene::default_bounds());
    let pose_a = Pose::origin();
    for (bx, by, byaw) in [(0.5, 0.15, 0.07), (1.0, 0.8, 0.4), (0.8, 1.2, 0.6), (0.3, 1.5, 0.8), (1.5, 1.0, 0.5)] {
        let pose_b = Pose::new(bx, by, byaw);
        let f = oracle_fundamental(&intr, &pose_a, &pose_b).unwrap();
        let s = f.matrix().singular_values();
        let n = sample_correspondences(&scene, &intr, &pose_a, &pose_b, 0.0, 0.0, 1)
            .map(|s| s.correspondences.len()).unwrap_or(0);
        // 100-trial recovery for promising candidates.
        let mut exact = 0;
        if n >= 55 {
            for trial in 0..100u64 {
                let sampled = sample_correspondences(&scene, &intr, &pose_a, &pose_b, 0.0, 0.3, 1000 + trial).unwrap();
                let mut corrs = Vec::new();
                let mut truth = Vec::new();
                let (mut il, mut ol) = (35, 15);
                for (c, &o) in sampled.correspondences.iter().zip(&sampled.outlier_mask) {
                    if o && ol > 0 { ol -= 1; } else if !o && il > 0 { il -= 1; } else { continue; }
                    truth.push(!o);
                    corrs.push(*c);
                }
                if corrs.len() < 50 { continue; }
                let result = ransac_fundamental(&corrs, 3.0, 2000, trial);
                let expected: Vec<usize> = truth.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i).collect();
                if result.inliers == expected { exact += 1; }
            }
        }
        println!("pose ({bx},{by},{byaw}): sv2/sv1={:.3e} covisible={n} exact={exact}/100", s[1]/s[0]);
    }
}

#[test]
fn probe_margin_scan() {
    use rand::{Rng, SeedableRng};
    let intr = CameraIntrinsics::default_224();
    let scene = Scene::random(202, 700, Scene::default_bounds());
    let pose_a = Pose::origin();
    for (bx, by, byaw) in [(0.5, 0.15, 0.07), (0.3, 1.5, 0.8)] {
        let pose_b = Pose::new(bx, by, byaw);
        let f_ab = oracle_fundamental(&intr, &pose_a, &pose_b).unwrap();
        let f_ba = f_ab.transposed();
        let clean = sample_correspondences(&scene, &intr, &pose_a, &pose_b, 0.0, 0.0, 1).unwrap();
        if clean.correspondences.len() < 35 { println!("pose ({bx},{by},{byaw}): too few covisible"); continue; }
        for margin in [24.0f64, 40.0, 60.0] {
            let mut exact = 0;
            for trial in 0..100u64 {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33_000 + trial);
                let mut corrs: Vec<Correspondence> = clean.correspondences[..35].to_vec();
                let mut expected: Vec<usize> = (0..35).collect();
                // 15 outliers: uniform pB far from both oracle epipolar lines.
                for k in 0..15 {
                    let a = clean.correspondences[35 + (k % (clean.correspondences.len() - 35))].a;
                    let la = project_epipolar_line(&f_ab, &HomoPoint2::from_pixel(a.x, a.y)).unwrap();
                    let mut b;
                    loop {
                        b = nalgebra::Point2::new(rng.random_range(0.0..224.0), rng.random_range(0.0..224.0));
                        let d1 = point_line_distance(&la, &HomoPoint2::from_pixel(b.x, b.y)).unwrap_or(0.0);
                        let lb = project_epipolar_line(&f_ba, &HomoPoint2::from_pixel(b.x, b.y)).unwrap();
                        let d2 = point_line_distance(&lb, &HomoPoint2::from_pixel(a.x, a.y)).unwrap_or(0.0);
                        if d1 >= margin && d2 >= margin { break; }
                    }
                    corrs.push(Correspondence { a, b, confidence: 0.9, valid: true });
                }
                let _ = &mut expected;
                let result = ransac_fundamental(&corrs, 3.0, 2000, trial);
                if result.inliers == (0..35).collect::<Vec<_>>() { exact += 1; }
            }
            println!("pose ({bx},{by},{byaw}) margin {margin}px: exact={exact}/100");
        }
    }
}
