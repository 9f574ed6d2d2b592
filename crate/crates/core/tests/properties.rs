mod common;

use std::path::Path;

use kmpadapt::gmm::{fit_gmm, gmr_condition, EmConfig};
use kmpadapt::io::{LearnMetadata, ModelFile};
use kmpadapt::kmp::{predict_mean, scale_time_profile, speed_factor};
use kmpadapt::llm::MockBackend;
use kmpadapt::registry::{dispatch, validate, DispatchOutcome, ParamKind, ToolCall, ToolRegistry};
use kmpadapt::tools::{Sdf, ToolConfig};
use kmpadapt::trajectory::{
    nearest_grid_index, normalize_demonstration, Demonstration, EnvironmentModel, EnvironmentObject, PhaseGrid,
    TimeProfile, Trajectory,
};
use nalgebra::{DVector, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn small_reference(seed: u64, n: usize) -> kmpadapt::kmp::ReferenceDistribution {
    common::random_reference(&mut ChaCha8Rng::seed_from_u64(seed), n, 3)
}

fn env() -> EnvironmentModel {
    let object = |label: &str, p: [f64; 3]| EnvironmentObject { label: label.into(), position: p, dimensions: [0.1; 3] };
    EnvironmentModel::new(vec![object("box", [0.3, 0.0, 0.0]), object("station", [0.0, 0.3, 0.3])], None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resampling_uniform_demo_is_idempotent(h in 2usize..80, duration in 0.1f64..30.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<_> = (0..h)
            .map(|i| {
                let t = if i == h - 1 { duration } else { duration * i as f64 / (h - 1) as f64 };
                (t, DVector::from_fn(3, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0)))
            })
            .collect();
        let demo = Demonstration::new(samples.clone()).unwrap();
        let (_, positions, profile) = normalize_demonstration(&demo, h).unwrap();
        for (p, (_, x)) in positions.iter().zip(&samples) {
            prop_assert!((p - x).amax() <= 1e-12);
        }
        prop_assert!((profile.total_duration() - duration).abs() <= 1e-12 * duration.max(1.0));
    }

    #[test]
    fn normalization_preserves_duration(gaps in prop::collection::vec(1e-3f64..0.5, 2..60), h in 2usize..300) {
        let mut t = 0.0;
        let mut samples = vec![(0.0, DVector::from_element(2, 0.0))];
        for (i, g) in gaps.iter().enumerate() {
            t += g;
            samples.push((t, DVector::from_element(2, i as f64)));
        }
        let demo = Demonstration::new(samples).unwrap();
        let (_, _, profile) = normalize_demonstration(&demo, h).unwrap();
        prop_assert!((profile.intervals().iter().sum::<f64>() - demo.duration()).abs() <= 1e-12 * demo.duration().max(1.0));
    }

    #[test]
    fn nearest_index_is_in_bounds_and_consistent(
        pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 2..60),
        q in prop::array::uniform3(-2.0f64..2.0),
    ) {
        let traj = Trajectory {
            grid: PhaseGrid::new(pts.len()).unwrap(),
            positions: pts.iter().map(|p| DVector::from_column_slice(p)).collect(),
            covariances: None,
            profile: TimeProfile::uniform(1.0, pts.len()).unwrap(),
        };
        let q = Vector3::from(q);
        let (i, d) = nearest_grid_index(&traj, &q);
        prop_assert!(i < traj.len());
        prop_assert_eq!(d, (traj.point3(i) - q).norm());
        prop_assert!((0..traj.len()).all(|j| (traj.point3(j) - q).norm() >= d));
    }

    #[test]
    fn speed_factor_inverse_identity(gamma in 0.0f64..200.0) {
        prop_assert!((speed_factor(gamma) * speed_factor(-gamma) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn scaling_keeps_geometry_and_duration_arithmetic(
        seed in any::<u64>(),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
        gamma in -200.0f64..200.0,
    ) {
        prop_assume!((a - b).abs() > 1e-3);
        let (s0, s1) = (a.min(b), a.max(b));
        let reference = small_reference(seed, 10);
        let scaled = scale_time_profile(&reference, s0, s1, gamma).unwrap();
        let grid = PhaseGrid::new(37).unwrap();
        prop_assert_eq!(
            predict_mean(&reference, grid).unwrap().positions,
            predict_mean(&scaled, grid).unwrap().positions
        );
        let g = reference.profile().grid();
        let (mut inside, mut outside) = (0.0, 0.0);
        for (h, dt) in reference.profile().intervals().iter().enumerate() {
            if s0 <= g.value(h) && g.value(h) < s1 { inside += dt } else { outside += dt }
        }
        let expected = outside + speed_factor(gamma) * inside;
        prop_assert!((scaled.profile().total_duration() - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn sphere_projection_lands_on_margin(
        c in prop::array::uniform3(-0.5f64..0.5),
        r in 0.01f64..0.3,
        dir in prop::array::uniform3(-1.0f64..1.0),
        depth in 0.0f64..1.0,
        margin in 0.0f64..0.05,
    ) {
        let dir = Vector3::from(dir);
        prop_assume!(dir.norm() > 1e-3);
        let sdf = Sdf::sphere(Vector3::from(c), r).unwrap();
        let p = Vector3::from(c) + dir.normalize() * (r + margin) * depth;
        prop_assume!(sdf.eval(&p) < margin && (p - Vector3::from(c)).norm() > 1e-9);
        let x = sdf.project(&p, margin).unwrap();
        prop_assert!((sdf.eval(&x) - margin).abs() <= 1e-9);
    }

    #[test]
    fn model_file_round_trip_is_byte_stable(seed in any::<u64>(), n in 1usize..15) {
        let reference = small_reference(seed, n);
        let meta = LearnMetadata {
            components: 3, reference_points: n, resample_points: 50, seed,
            final_log_likelihood: Some(-12.5), demos: vec![],
        };
        let text = ModelFile::new(&reference, meta).to_json();
        let loaded = ModelFile::from_json(Path::new("m.json"), &text).unwrap();
        prop_assert_eq!(loaded.to_json(), text.clone());
        prop_assert_eq!(loaded.reference().unwrap(), reference);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gmm_is_deterministic_psd_and_smooth(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<DVector<f64>> = (0..300)
            .map(|i| {
                let s = i as f64 / 299.0;
                let noise = |rng: &mut ChaCha8Rng| rand::Rng::random_range(rng, -0.01..0.01);
                DVector::from_vec(vec![s, (3.0 * s).sin() + noise(&mut rng), s * s + noise(&mut rng)])
            })
            .collect();
        let a = fit_gmm(&data, k, seed, &EmConfig::default()).unwrap();
        let b = fit_gmm(&data, k, seed, &EmConfig::default()).unwrap();
        prop_assert_eq!(&a, &b);
        for c in &a.components {
            prop_assert!((&c.covariance - c.covariance.transpose()).amax() == 0.0);
            prop_assert!(c.covariance.clone().symmetric_eigen().eigenvalues.min() >= 0.0);
        }
        prop_assert!(a.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-7));
        for i in 0..100 {
            let s = i as f64 / 100.0;
            let (m0, _) = gmr_condition(&a, s);
            let (m1, _) = gmr_condition(&a, s + 1e-6);
            prop_assert!((m0 - m1).norm() < 1e-3);
        }
    }
}

fn arb_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        (-1e6f64..1e6).prop_map(|x| json!(x)),
        (-300i64..300).prop_map(|x| json!(x)),
        prop_oneof![Just(0.0), Just(1.0), Just(-0.0), Just(1e300), Just(-1e300), Just(f64::MIN_POSITIVE)].prop_map(|x| json!(x)),
        prop_oneof![Just("box"), Just("station"), Just("BOX "), Just(""), Just("nowhere"), Just("0.5")].prop_map(|s| json!(s)),
        "[a-z ]{0,8}".prop_map(Value::String),
    ];
    leaf.prop_recursive(2, 8, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..5).prop_map(Value::Array),
            prop::collection::vec(("[a-z_]{1,6}", inner), 0..3)
                .prop_map(|kv| Value::Object(kv.into_iter().collect())),
        ]
    })
}

const NAMES: [&str; 6] = ["SpeedUpRobot", "InsertViaPoint", "GenerateRepulsionPoints", "RespondToUser", "Teleport", ""];
const KEYS: [&str; 16] = [
    "speed_up_value", "adaption_start", "adaption_end", "target_label", "target_position", "offset", "s_hint",
    "after", "before", "covariance_scale", "obstacle", "obstacle_center", "obstacle_radius",
    "obstacle_half_extents", "text", "bogus",
];

fn arb_call() -> impl Strategy<Value = ToolCall> {
    (
        prop::sample::select(NAMES.to_vec()),
        prop::collection::vec((prop::sample::select(KEYS.to_vec()), arb_value()), 0..5),
        prop::option::weighted(0.1, arb_value()),
    )
        .prop_map(|(name, kv, raw)| {
            let arguments = raw.unwrap_or_else(|| Value::Object(kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()));
            ToolCall::new("call_0", name, arguments)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn dispatch_never_mutates_on_rejection(call in arb_call()) {
        let reference = small_reference(3, 12);
        let copy = reference.clone();
        let cfg = ToolConfig::default();
        let registry = ToolRegistry::standard(&cfg);
        let traj = predict_mean(&reference, reference.execution_grid()).unwrap();
        let report = validate(&call, &registry, &cfg);
        let outcome = dispatch(&call, &reference, &traj, &env(), &cfg, &registry);
        prop_assert_eq!(&reference, &copy);
        match &outcome {
            DispatchOutcome::Rejected { report, feedback } => {
                prop_assert!(!report.is_ok());
                prop_assert!(!feedback.is_empty());
                prop_assert!(outcome.reference().is_none());
            }
            DispatchOutcome::Applied { .. } => prop_assert!(report.is_ok()),
            _ => prop_assert!(outcome.reference().is_none()),
        }
        if !report.is_ok() {
            prop_assert!(!outcome.is_mutation());
        }
    }

    #[test]
    fn accepted_parameters_are_in_the_schema(call in arb_call()) {
        let cfg = ToolConfig::default();
        let registry = ToolRegistry::standard(&cfg);
        if validate(&call, &registry, &cfg).is_ok() {
            let tool = registry.get(&call.name).unwrap();
            let schema = tool.schema();
            let props = &schema["function"]["parameters"]["properties"];
            for (key, value) in call.arguments.as_object().unwrap() {
                if value.is_null() { continue }
                prop_assert!(props.get(key).is_some(), "{} accepted but not in schema", key);
            }
        }
    }
}

#[test]
fn schema_and_descriptors_agree() {
    let cfg = ToolConfig::default();
    let registry = ToolRegistry::standard(&cfg);
    for tool in registry.tools() {
        let schema = tool.schema();
        let params = &schema["function"]["parameters"];
        let props = params["properties"].as_object().unwrap();
        assert_eq!(props.len(), tool.parameters.len(), "{}", tool.name);
        let required: Vec<&str> = params["required"].as_array().map(|r| r.iter().filter_map(Value::as_str).collect()).unwrap_or_default();
        for p in &tool.parameters {
            let s = &props[&p.name];
            let ty = &s["type"];
            let expected = match p.kind {
                ParamKind::Integer => json!("integer"),
                ParamKind::Number => json!("number"),
                ParamKind::String | ParamKind::Enum(_) => json!("string"),
                ParamKind::Vector3 => json!("array"),
                ParamKind::PhaseOrLabel => json!(["number", "string"]),
            };
            assert_eq!(ty, &expected, "{}.{}", tool.name, p.name);
            assert_eq!(required.contains(&p.name.as_str()), p.required, "{}.{}", tool.name, p.name);
            if let Some((lo, hi)) = p.range {
                let bounds = if p.kind == ParamKind::Vector3 { &s["items"] } else { s };
                assert_eq!(bounds["minimum"].as_f64(), Some(lo), "{}.{}", tool.name, p.name);
                assert_eq!(bounds["maximum"].as_f64(), Some(hi), "{}.{}", tool.name, p.name);
            }
        }
    }
}

#[test]
fn mock_backend_is_deterministic() {
    let text = std::fs::read_to_string(common::data_dir().join("mock_rules.json")).unwrap();
    let env = load_env();
    for instruction in ["Slow down between box and station", "Check the ring with the camera on the left", "Please avoid the blue box", "hello"] {
        let a = MockBackend::from_json(&text).unwrap().respond(instruction, &env).unwrap();
        let b = MockBackend::from_json(&text).unwrap().respond(instruction, &env).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

fn load_env() -> EnvironmentModel {
    kmpadapt::io::load_environment(&common::data_dir().join("bearing_ring_env.json")).unwrap()
}
