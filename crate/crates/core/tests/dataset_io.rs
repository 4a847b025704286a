use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use tomnet_core::datagen::{
    generate, make_windows, read_dataset, split_fleet, write_dataset, DataError, ExcitationConfig, Split, MANIFEST_FILE,
};
use tomnet_core::machines::{spawn_fleet, MachineClass};

fn small() -> tomnet_core::datagen::Dataset {
    let counts = BTreeMap::from([(MachineClass::Suv, 2), (MachineClass::Lti, 1), (MachineClass::Stateless, 1)]);
    let fleet = spawn_fleet(5, &counts);
    let split = split_fleet(&fleet, 2, 2, 5).unwrap();
    generate(&fleet, 5, ExcitationConfig { length: 150, ..Default::default() }, split).unwrap()
}

#[test]
fn round_trip_is_bit_exact() {
    let data = small();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, data.manifest);
    for (a, b) in data.trajectories.iter().zip(&back.trajectories) {
        assert_eq!(a.machine_id, b.machine_id);
        for (p, q) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(p.t, q.t);
            assert_eq!(p.input.to_array().map(f64::to_bits), q.input.to_array().map(f64::to_bits));
            assert_eq!(p.output.to_array().map(f64::to_bits), q.output.to_array().map(f64::to_bits));
        }
    }
    let again = tempfile::tempdir().unwrap();
    write_dataset(&back, again.path()).unwrap();
    for name in [MANIFEST_FILE.to_string(), "traj_0.jsonl".into(), "traj_3.jsonl".into()] {
        assert_eq!(fs::read(dir.path().join(&name)).unwrap(), fs::read(again.path().join(&name)).unwrap());
    }
}

#[test]
fn missing_directory_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = read_dataset(&dir.path().join("absent")).unwrap_err();
    assert!(matches!(err, DataError::MissingFile { .. }), "{err:?}");
    assert!(err.to_string().contains("absent"));
}

#[test]
fn missing_trajectory_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&small(), dir.path()).unwrap();
    fs::remove_file(dir.path().join("traj_2.jsonl")).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("traj_2.jsonl"), "{err}");
}

#[test]
fn unknown_format_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&small(), dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap().replacen("TOMD-1", "TOMD-99", 1);
    fs::write(&path, text).unwrap();
    match read_dataset(dir.path()).unwrap_err() {
        DataError::UnsupportedVersion { found, .. } => assert_eq!(found, "TOMD-99"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn windows_stay_within_one_machine_and_splits_are_disjoint() {
    let data = small();
    let train: BTreeSet<u32> = data.manifest.split.ids(Split::Train).iter().copied().collect();
    let test: BTreeSet<u32> = data.manifest.split.ids(Split::Test).iter().copied().collect();
    assert!(train.is_disjoint(&test));
    assert_eq!(train.len() + test.len(), data.trajectories.len());
    for traj in &data.trajectories {
        for w in make_windows(traj, 20, 7).unwrap() {
            assert_eq!(w.machine_id, traj.machine_id);
            assert_eq!(w.pairs.len(), 20);
            assert_eq!(w.pairs[0].t, w.start as u64);
            assert!(w.pairs.windows(2).all(|p| p[1].t == p[0].t + 1));
        }
    }
}

#[test]
fn default_vehicle_fleet_has_sixty_four_thousand_pairs() {
    let counts = BTreeMap::from([
        (MachineClass::Suv, 4),
        (MachineClass::Track, 4),
        (MachineClass::Sport, 4),
        (MachineClass::Gt, 4),
    ]);
    let fleet = spawn_fleet(1, &counts);
    let split = split_fleet(&fleet, 12, 4, 1).unwrap();
    let data = generate(&fleet, 1, ExcitationConfig::default(), split).unwrap();
    assert_eq!(data.trajectories.iter().map(|t| t.len()).sum::<usize>(), 64_000);
}
