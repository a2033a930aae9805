use super::*;
use crate::geometry::{geodesic_distance, orthonormality_error};
use approx::assert_relative_eq;
use nalgebra::Matrix4;
use proptest::prelude::*;
use std::f64::consts::PI;

fn asset(name: &str) -> String {
    let path = format!("{}/../../assets/robots/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

const SINGLE_LINK: &str = r#"<robot name="blob"><link name="base"/></robot>"#;

const ONE_JOINT: &str = r#"<?xml version="1.0"?>
<robot name="one">
  <link name="base"/>
  <link name="arm"/>
  <link name="tip"/>
  <joint name="j" type="revolute">
    <parent link="base"/><child link="arm"/>
    <axis xyz="0 0 1"/>
    <limit lower="-1" upper="1" effort="1" velocity="2"/>
  </joint>
  <joint name="tip_joint" type="fixed">
    <parent link="arm"/><child link="tip"/>
    <origin xyz="1 0 0"/>
  </joint>
</robot>"#;

#[test]
fn single_link_has_no_actuated_joints() {
    let m = load_robot_description(SINGLE_LINK, None).unwrap();
    assert_eq!(m.links().len(), 1);
    assert_eq!(m.dof(), 0);
    let pose = m.forward_kinematics(&[], "base").unwrap();
    assert_eq!(pose, RigidTransform::identity());
}

#[test]
fn revolute_limits_transcribed() {
    let m = load_robot_description(ONE_JOINT, None).unwrap();
    assert_eq!(m.actuated_joint_names(), vec!["j".to_string()]);
    assert_eq!(m.lower_limits(), vec![-1.0]);
    assert_eq!(m.upper_limits(), vec![1.0]);
    assert_eq!(m.velocity_limits(), vec![2.0]);
}

#[test]
fn bundled_fixture_joint_counts() {
    // Counts frozen from an independent ElementTree scan of the fixture files.
    let cases = [
        ("four_finger_hand.urdf", 16),
        ("five_finger_hand.urdf", 17),
        ("three_finger_claw.urdf", 9),
        ("planar_finger.urdf", 2),
        ("arm6.urdf", 6),
        ("arm6_hand.urdf", 22),
        ("arm7.urdf", 7),
    ];
    for (file, dof) in cases {
        let m = load_robot_description(&asset(file), None).unwrap();
        assert_eq!(m.dof(), dof, "{file}");
    }
}

#[test]
fn quarter_turn_moves_child_onto_y_axis() {
    let urdf = ONE_JOINT.replace(r#"lower="-1" upper="1""#, r#"lower="-2" upper="2""#);
    let m = load_robot_description(&urdf, None).unwrap();
    let tip = m.forward_kinematics(&[PI / 2.0], "tip").unwrap();
    assert_relative_eq!(tip.translation, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
}

#[test]
fn zero_configuration_is_product_of_origins() {
    let m = load_robot_description(&asset("arm6.urdf"), None).unwrap();
    let tool = m.forward_kinematics(&[0.0; 6], "tool0").unwrap();
    // 0.10 + 0.10 + 0.40 + 0.35 + 0.08 + 0.08 + 0.05 straight up.
    assert_relative_eq!(tool.translation, Vector3::new(0.0, 0.0, 1.16), epsilon = 1e-12);
    assert!(geodesic_distance(&tool.rotation, &Rotation3::identity()) < 1e-12);
}

#[test]
fn keypoint_vector_self_difference_is_zero() {
    let m = load_robot_description(&asset("four_finger_hand.urdf"), None).unwrap();
    let q = m.mid_configuration();
    assert_eq!(m.keypoint_vector(&q, "index_tip", "index_tip").unwrap(), Vector3::zeros());
}

#[test]
fn keypoint_vector_at_zero_is_difference_of_static_origins() {
    let m = load_robot_description(&asset("planar_finger.urdf"), None).unwrap();
    let v = m.keypoint_vector(&[0.0, 0.0], "base", "tip").unwrap();
    assert_relative_eq!(v, Vector3::new(0.09, 0.0, 0.0), epsilon = 1e-12);
}

#[test]
fn jacobian_single_revolute_column() {
    let m = load_robot_description(ONE_JOINT, None).unwrap();
    let j = m.jacobian(&[0.0], "tip").unwrap();
    // axis z × (1,0,0) = (0,1,0)
    assert_relative_eq!(j[(0, 0)], 0.0, epsilon = 1e-15);
    assert_relative_eq!(j[(1, 0)], 1.0, epsilon = 1e-15);
    assert_relative_eq!(j[(2, 0)], 0.0, epsilon = 1e-15);
    assert_relative_eq!(j[(5, 0)], 1.0, epsilon = 1e-15);
}

#[test]
fn jacobian_zero_for_joints_off_the_path() {
    let m = load_robot_description(&asset("four_finger_hand.urdf"), None).unwrap();
    let q = m.mid_configuration();
    let j = m.jacobian(&q, "index_tip").unwrap();
    let names = m.actuated_joint_names();
    for (col, name) in names.iter().enumerate() {
        let on_path = name.starts_with("index_");
        let norm = j.column(col).norm();
        if on_path {
            assert!(norm > 0.0, "{name}");
        } else {
            assert_eq!(norm, 0.0, "{name}");
        }
    }
}

#[test]
fn clamp_examples() {
    let m = load_robot_description(&asset("arm6.urdf"), None).unwrap();
    let inside = JointConfig::new(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.5]);
    assert_eq!(m.clamp_to_limits(&inside).unwrap(), inside);

    let over = JointConfig::new(m.upper_limits().iter().map(|u| u + 1.0).collect());
    assert_eq!(m.clamp_to_limits(&over).unwrap().values, m.upper_limits());

    let mixed = JointConfig::new(vec![-10.0, 10.0, 0.1, -3.0, 4.0, 0.0]);
    let clamped = m.clamp_to_limits(&mixed).unwrap();
    let (lo, hi) = (m.lower_limits(), m.upper_limits());
    for i in 0..6 {
        let mut expected = mixed.values[i];
        if expected < lo[i] {
            expected = lo[i];
        }
        if expected > hi[i] {
            expected = hi[i];
        }
        assert_eq!(clamped.values[i], expected);
    }

    assert!(matches!(
        m.clamp_to_limits(&JointConfig::new(vec![0.0; 3])),
        Err(KinematicsError::DimensionMismatch { expected: 6, got: 3 })
    ));
}

#[test]
fn unknown_link_is_reported() {
    let m = load_robot_description(ONE_JOINT, None).unwrap();
    assert_eq!(
        m.forward_kinematics(&[0.0], "nope").unwrap_err(),
        KinematicsError::UnknownLink("nope".into())
    );
    assert!(matches!(m.jacobian(&[0.0], "nope"), Err(KinematicsError::UnknownLink(_))));
}

#[test]
fn malformed_xml_and_missing_attributes() {
    assert!(matches!(load_robot_description("<robot", None), Err(KinematicsError::Parse(_))));
    let no_velocity = ONE_JOINT.replace(r#" velocity="2""#, "");
    assert!(matches!(load_robot_description(&no_velocity, None), Err(KinematicsError::Parse(_))));
    let no_child = ONE_JOINT.replace(r#"<child link="arm"/>"#, "");
    assert!(matches!(load_robot_description(&no_child, None), Err(KinematicsError::Parse(_))));
}

#[test]
fn structural_errors() {
    let non_unit = ONE_JOINT.replace(r#"<axis xyz="0 0 1"/>"#, r#"<axis xyz="0 0 2"/>"#);
    assert!(matches!(load_robot_description(&non_unit, None), Err(KinematicsError::Kinematic(_))));

    let two_roots = r#"<robot name="r"><link name="a"/><link name="b"/></robot>"#;
    assert!(matches!(load_robot_description(two_roots, None), Err(KinematicsError::Kinematic(_))));

    let cycle = r#"<robot name="r">
      <link name="a"/><link name="b"/><link name="c"/>
      <joint name="ab" type="fixed"><parent link="a"/><child link="b"/></joint>
      <joint name="bc" type="fixed"><parent link="b"/><child link="c"/></joint>
      <joint name="ca" type="fixed"><parent link="c"/><child link="a"/></joint>
    </robot>"#;
    assert!(matches!(load_robot_description(cycle, None), Err(KinematicsError::Kinematic(_))));

    let inverted = ONE_JOINT.replace(r#"lower="-1" upper="1""#, r#"lower="1" upper="-1""#);
    assert!(matches!(load_robot_description(&inverted, None), Err(KinematicsError::Kinematic(_))));

    let floating = ONE_JOINT.replace(r#"type="revolute""#, r#"type="floating""#);
    assert!(matches!(load_robot_description(&floating, None), Err(KinematicsError::Kinematic(_))));
}

#[test]
fn continuous_joint_gets_wide_limits() {
    let urdf = ONE_JOINT
        .replace(r#"type="revolute""#, r#"type="continuous""#)
        .replace(r#"<limit lower="-1" upper="1" effort="1" velocity="2"/>"#, "");
    let m = load_robot_description(&urdf, None).unwrap();
    assert_eq!(m.lower_limits(), vec![-CONTINUOUS_RANGE]);
    assert_eq!(m.upper_limits(), vec![CONTINUOUS_RANGE]);
    assert_eq!(m.velocity_limits(), vec![CONTINUOUS_DEFAULT_VELOCITY]);
}

#[test]
fn mimic_joints_fold_into_source_column() {
    let m = load_robot_description(&asset("five_finger_hand.urdf"), None).unwrap();
    assert!(!m.actuated_joint_names().iter().any(|n| n == "index_dip"));
    let pip = m.actuated_joint_names().iter().position(|n| n == "index_pip").unwrap();

    let mut q = m.mid_configuration();
    let base = m.forward_kinematics(&q, "index_tip").unwrap().translation;
    let h = 1e-6;
    q[pip] += h;
    let plus = m.forward_kinematics(&q, "index_tip").unwrap().translation;
    q[pip] -= 2.0 * h;
    let minus = m.forward_kinematics(&q, "index_tip").unwrap().translation;
    q[pip] += h;
    let fd = (plus - minus) / (2.0 * h);
    let jac = m.jacobian(&q, "index_tip").unwrap();
    let analytic = Vector3::new(jac[(0, pip)], jac[(1, pip)], jac[(2, pip)]);
    assert!((fd - analytic).norm() < 1e-6 * analytic.norm().max(1.0));
    assert!(base.norm() > 0.0);
}

#[test]
fn sphere_sidecar_loaded_and_validated() {
    let m = load_robot_description(&asset("arm6.urdf"), Some(&asset("arm6.spheres.json"))).unwrap();
    assert_eq!(m.sphere_count(), 11);
    let bad = r#"{"base_link": [{"center": [0,0,0], "radius": 0.0}]}"#;
    assert!(matches!(
        load_robot_description(&asset("arm6.urdf"), Some(bad)),
        Err(KinematicsError::Kinematic(_))
    ));
    let unknown = r#"{"ghost": [{"center": [0,0,0], "radius": 0.1}]}"#;
    assert!(load_robot_description(&asset("arm6.urdf"), Some(unknown)).is_err());
    assert!(matches!(
        load_robot_description(&asset("arm6.urdf"), Some("{")),
        Err(KinematicsError::Parse(_))
    ));
}

#[test]
fn subtree_and_remainder_split_arm_and_hand() {
    let full = load_robot_description(&asset("arm6_hand.urdf"), Some(&asset("arm6_hand.spheres.json"))).unwrap();
    let hand = full.subtree("palm").unwrap();
    let arm = full.without_subtree("palm").unwrap();
    assert_eq!(hand.dof(), 16);
    assert_eq!(arm.dof(), 6);
    assert_eq!(hand.root_link(), "palm");
    assert!(arm.link_index("palm").is_ok());
    assert!(arm.link_index("index_tip").is_err());
    assert_eq!(arm.sphere_count(), full.sphere_count());
}

// ---------------------------------------------------------------------------
// Naive homogeneous-matrix oracle over randomly generated serial chains.

/// xyz, rpy, axis, prismatic
type JointSpec = ([f64; 3], [f64; 3], [f64; 3], bool);

#[derive(Debug, Clone)]
struct ChainSpec {
    joints: Vec<JointSpec>,
}

fn chain_urdf(spec: &ChainSpec) -> String {
    let mut s = String::from("<robot name=\"chain\">\n<link name=\"l0\"/>\n");
    for (i, (xyz, rpy, axis, prismatic)) in spec.joints.iter().enumerate() {
        s += &format!(
            "<link name=\"l{}\"/>\n<joint name=\"j{i}\" type=\"{}\"><parent link=\"l{i}\"/><child link=\"l{}\"/>\
             <origin xyz=\"{:?} {:?} {:?}\" rpy=\"{:?} {:?} {:?}\"/><axis xyz=\"{:?} {:?} {:?}\"/>\
             <limit lower=\"-10\" upper=\"10\" velocity=\"1\"/></joint>\n",
            i + 1,
            if *prismatic { "prismatic" } else { "revolute" },
            i + 1,
            xyz[0], xyz[1], xyz[2], rpy[0], rpy[1], rpy[2], axis[0], axis[1], axis[2],
        );
    }
    s + "</robot>"
}

fn naive_rot(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn homogeneous(r: [[f64; 3]; 3], p: [f64; 3]) -> Matrix4<f64> {
    Matrix4::new(
        r[0][0], r[0][1], r[0][2], p[0], r[1][0], r[1][1], r[1][2], p[1], r[2][0], r[2][1], r[2][2], p[2],
        0.0, 0.0, 0.0, 1.0,
    )
}

fn naive_chain_pose(spec: &ChainSpec, q: &[f64]) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for ((xyz, rpy, axis, prismatic), &qi) in spec.joints.iter().zip(q) {
        let rx = naive_rot([1.0, 0.0, 0.0], rpy[0]);
        let ry = naive_rot([0.0, 1.0, 0.0], rpy[1]);
        let rz = naive_rot([0.0, 0.0, 1.0], rpy[2]);
        let origin = homogeneous(rz, [0.0; 3]) * homogeneous(ry, [0.0; 3]) * homogeneous(rx, [0.0; 3]);
        let origin = homogeneous([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], *xyz) * origin;
        let motion = if *prismatic {
            homogeneous(
                [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                [axis[0] * qi, axis[1] * qi, axis[2] * qi],
            )
        } else {
            homogeneous(naive_rot(*axis, qi), [0.0; 3])
        };
        m = m * origin * motion;
    }
    m
}

fn arb_unit() -> impl Strategy<Value = [f64; 3]> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-degenerate", |(x, y, z)| x * x + y * y + z * z > 0.05)
        .prop_map(|(x, y, z)| {
            let n = (x * x + y * y + z * z).sqrt();
            [x / n, y / n, z / n]
        })
}

fn arb_chain(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = ChainSpec> {
    prop::collection::vec(
        (
            prop::array::uniform3(-0.3..0.3f64),
            prop::array::uniform3(-PI..PI),
            arb_unit(),
            prop::bool::weighted(0.2),
        ),
        len,
    )
    .prop_map(|joints| ChainSpec { joints })
}

fn chain_and_q(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = (ChainSpec, Vec<f64>)> {
    arb_chain(len).prop_flat_map(|spec| {
        let n = spec.joints.len();
        (Just(spec), prop::collection::vec(-PI..PI, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn fk_matches_naive_matrix_chain((spec, q) in chain_and_q(1..=8)) {
        let model = load_robot_description(&chain_urdf(&spec), None).unwrap();
        let last = format!("l{}", spec.joints.len());
        let pose = model.forward_kinematics(&q, &last).unwrap();
        let oracle = naive_chain_pose(&spec, &q);
        for r in 0..3 {
            for c in 0..3 {
                prop_assert!((pose.rotation.matrix()[(r, c)] - oracle[(r, c)]).abs() < 1e-9);
            }
            prop_assert!((pose.translation[r] - oracle[(r, 3)]).abs() < 1e-9);
        }
        // Parent/child consistency along the whole chain.
        let poses = model.link_poses(&q).unwrap();
        for joint in model.joints() {
            let motion = match joint.kind {
                JointKind::Revolute => RigidTransform::from_rotation(Rotation3::from_axis_angle(
                    &joint.axis,
                    q[model.actuated_joint_names().iter().position(|n| *n == joint.name).unwrap()],
                )),
                JointKind::Prismatic => RigidTransform::from_translation(
                    joint.axis.into_inner()
                        * q[model.actuated_joint_names().iter().position(|n| *n == joint.name).unwrap()],
                ),
                JointKind::Fixed => RigidTransform::identity(),
            };
            let expected = poses[joint.parent] * joint.origin * motion;
            let (dr, dt) = expected.distance_to(&poses[joint.child]);
            prop_assert!(dr < 1e-9 && dt < 1e-9);
        }
    }

    #[test]
    fn clamp_is_idempotent_and_feasible(q in prop::collection::vec(-10.0..10.0f64, 6)) {
        let model = load_robot_description(&asset("arm6.urdf"), None).unwrap();
        let once = model.clamp_to_limits(&JointConfig::new(q)).unwrap();
        let twice = model.clamp_to_limits(&once).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert!(model.within_limits(&once.values));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn jacobian_matches_central_differences((spec, q) in chain_and_q(6..=6)) {
        let model = load_robot_description(&chain_urdf(&spec), None).unwrap();
        let link = format!("l{}", 3 + q.len() % 4);
        let link = if model.link_index(&link).is_ok() { link } else { "l6".to_string() };
        let jac = model.jacobian(&q, &link).unwrap();
        let h = 1e-6;
        let mut fd = DMatrix::zeros(6, q.len());
        for i in 0..q.len() {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            let pp = model.forward_kinematics(&qp, &link).unwrap();
            let pm = model.forward_kinematics(&qm, &link).unwrap();
            let lin = (pp.translation - pm.translation) / (2.0 * h);
            let ang = crate::geometry::so3_log(&(pp.rotation * pm.rotation.inverse())) / (2.0 * h);
            for r in 0..3 {
                fd[(r, i)] = lin[r];
                fd[(r + 3, i)] = ang[r];
            }
        }
        let rel = (&jac - &fd).norm() / jac.norm().max(1e-12);
        prop_assert!(rel < 1e-4, "relative Frobenius error {rel}");
    }

    #[test]
    fn long_chains_stay_orthonormal((spec, q) in chain_and_q(40..=40)) {
        let model = load_robot_description(&chain_urdf(&spec), None).unwrap();
        for pose in model.link_poses(&q).unwrap() {
            prop_assert!(orthonormality_error(pose.rotation.matrix()) < 1e-8);
        }
    }
}
