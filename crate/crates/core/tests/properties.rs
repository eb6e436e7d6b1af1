//! Property tests for geometry, rasterization, metrics, binning and formats.

use geoview::gar::{rasterize, ColoredPointCloud, PointMap};
use geoview::geometry::{
    make_extrapolated_pose, pose_offset_degrees, CameraIntrinsics, CameraPose,
};
use geoview::io;
use geoview::lpsr::{bin_index, masked_mse, s_psnr, SparseReference, PSNR_CAP_DB};
use geoview::raster::Grid;
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

fn pose_strategy() -> impl Strategy<Value = CameraPose> {
    (
        -3.1f64..3.1,
        -1.5f64..1.5,
        -3.1f64..3.1,
        -5.0f64..5.0,
        -5.0f64..5.0,
        -5.0f64..5.0,
    )
        .prop_map(|(r, p, y, tx, ty, tz)| {
            let rot = Rotation3::from_euler_angles(r, p, y).into_inner();
            CameraPose::new(rot, Vector3::new(tx, ty, tz)).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pose_offset_is_a_metric(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
        let (ab, bc, ac) = (pose_offset_degrees(&a, &b), pose_offset_degrees(&b, &c), pose_offset_degrees(&a, &c));
        prop_assert!(ac <= ab + bc + 1e-9);
        prop_assert!((0.0..=180.0).contains(&ab));
        prop_assert!((ab - pose_offset_degrees(&b, &a)).abs() < 1e-9);
        prop_assert!(pose_offset_degrees(&a, &a) < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn extrapolated_pose_hits_its_endpoints(a in pose_strategy(), b in pose_strategy(), f in 0.0f64..=1.0) {
        prop_assert_eq!(make_extrapolated_pose(&a, &b, 0.0, 0.0).unwrap(), a.clone());
        prop_assert_eq!(make_extrapolated_pose(&a, &b, 1.0, 0.0).unwrap(), b.clone());
        let mid = make_extrapolated_pose(&a, &b, f, 0.0).unwrap();
        let total = pose_offset_degrees(&a, &b);
        // Slerp splits the geodesic angle in proportion.
        if total < 179.0 {
            prop_assert!((pose_offset_degrees(&a, &mid) - f * total).abs() < 1e-6);
        }
    }

    #[test]
    fn rasterized_maps_are_zero_filled_and_front_most(
        pts in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0, -2.0f64..12.0), 1..300),
        w in 2usize..24,
        h in 2usize..24,
    ) {
        let k = CameraIntrinsics::with_fov(w, h, 70.0).unwrap();
        let positions: Vec<[f64; 3]> = pts.iter().map(|&(x, y, z)| [x, y, z]).collect();
        let colors = (0..positions.len()).map(|i| [i as f64 / positions.len() as f64, 0.5, 1.0]).collect();
        let cloud = ColoredPointCloud::new(positions.clone(), colors).unwrap();
        let c = rasterize(&cloud, &k, &CameraPose::identity());
        c.check_invariants().unwrap();
        for y in 0..h {
            for x in 0..w {
                if *c.validity.get(x, y) {
                    // No point landing in this pixel is in front of the winner.
                    let d = *c.depth.get(x, y);
                    for p in &positions {
                        if p[2] > 0.0 {
                            let u = (k.fx * p[0] / p[2] + k.cx).round();
                            let v = (k.fy * p[1] / p[2] + k.cy).round();
                            if u == x as f64 && v == y as f64 {
                                prop_assert!(p[2] >= d);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn psnr_is_capped_and_monotone_in_error(
        values in prop::collection::vec(0.0f64..1.0, 48),
        delta in 0.001f64..0.5,
    ) {
        let reference = Grid::from_fn(4, 4, |x, y| {
            let i = 3 * (y * 4 + x);
            [values[i], values[i + 1], values[i + 2]]
        });
        let mask = Grid::filled(4, 4, true);
        let r = SparseReference::new(reference.clone(), mask).unwrap();
        prop_assert_eq!(s_psnr(&reference, &r).unwrap(), PSNR_CAP_DB);
        let shift = |d: f64| reference.map(|p| p.map(|v| v + d));
        let near = s_psnr(&shift(delta / 2.0), &r).unwrap();
        let far = s_psnr(&shift(delta), &r).unwrap();
        prop_assert!(far < near);
        prop_assert!((masked_mse(&shift(delta), &r).unwrap() - delta * delta).abs() < 1e-12);
    }

    #[test]
    fn bins_are_half_open_with_a_closed_last_bin(v in -1.0f64..40.0) {
        let edges = [0.0, 5.0, 10.0, 15.0, 20.0, 30.0];
        match bin_index(&edges, v) {
            Some(i) => {
                prop_assert!(edges[i] <= v);
                prop_assert!(v < edges[i + 1] || (i == 4 && v == 30.0));
            }
            None => prop_assert!(!(0.0..=30.0).contains(&v)),
        }
        prop_assert_eq!(bin_index(&edges, 30.0), Some(4));
        prop_assert_eq!(bin_index(&edges, 5.0), Some(1));
    }

    #[test]
    fn point_map_bytes_survive_decode_encode(
        w in 1usize..12,
        h in 1usize..12,
        raw in prop::collection::vec((any::<f32>(), any::<bool>()), 144 * 3),
    ) {
        let points = Grid::from_fn(w, h, |x, y| {
            let i = 3 * (y * w + x);
            [raw[i].0, raw[i + 1].0, raw[i + 2].0].map(|v| if v.is_finite() { v as f64 } else { 0.0 })
        });
        let valid = Grid::from_fn(w, h, |x, y| raw[3 * (y * w + x)].1);
        let pm = PointMap::new(points, valid).unwrap();
        let bytes = io::encode_point_map(&pm).unwrap();
        let back = io::decode_point_map(&bytes).unwrap();
        prop_assert_eq!(&back, &pm);
        prop_assert_eq!(io::encode_point_map(&back).unwrap(), bytes);
    }
}
