use std::path::PathBuf;

use pamrc::config::{RunConfig, Scenario, TeacherKind};
use pamrc::loops::TEACHER_PRESSURE_RANGE;

fn golden(s: Scenario) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{}.json", s.name()));
    RunConfig::from_file(s, &path, &[]).unwrap()
}

#[test]
fn golden_files_match_defaults() {
    for s in Scenario::ALL {
        let g = golden(s);
        assert_eq!(g, RunConfig::defaults(s), "{s}");
        assert_eq!(g.hash().unwrap(), RunConfig::defaults(s).hash().unwrap());
    }
}

#[test]
fn shared_constants() {
    for s in Scenario::ALL {
        let c = golden(s);
        assert_eq!(c.multiplex.samples_per_interval, 5, "{s}");
        assert_eq!((c.closed_loop.protocol.clip.u_min, c.closed_loop.protocol.clip.u_max), (0.0, 0.5));
        assert_eq!(c.dynamics.dt, 1e-3);
    }
    assert_eq!(TEACHER_PRESSURE_RANGE, (0.1, 0.5));
}

#[test]
fn bifurcation_sweeps_and_intervals() {
    for s in [Scenario::BifurcationA, Scenario::BifurcationB, Scenario::BifurcationC, Scenario::BifurcationD] {
        let c = golden(s);
        let sw = &c.load.sweep;
        assert_eq!((sw.from, sw.to, sw.step, sw.hold), (100.0, 250.0, 5.0, 2000), "{s}");
        assert_eq!(sw.schedule().unwrap().plateaus.len(), 31);
        let expected = if c.teacher.kind == TeacherKind::Logistic { 0.2 } else { 0.1 };
        assert_eq!(c.schedule.interval, expected, "{s}");
    }
    assert_eq!(golden(Scenario::BifurcationB).teacher.periods, vec![1.2, 2.4]);
    assert_eq!(golden(Scenario::BifurcationB).teacher.loads, vec![100.0, 250.0]);
    assert_eq!(golden(Scenario::BifurcationC).teacher.logistic.a, 3.7);
    assert_eq!(golden(Scenario::BifurcationD).teacher.logistic.a, 3.55);
}

#[test]
fn open_loop_protocols() {
    let se = golden(Scenario::SensorEmulation);
    assert_eq!(se.schedule.interval, 0.1);
    assert_eq!(se.readout.n_train, 5000);
    assert_eq!(se.study.esn_nodes, 600);
    assert_eq!(se.study.sizes.first(), Some(&100));
    assert_eq!(se.study.sizes.last(), Some(&10_000));
    let sine = golden(Scenario::EmbedSine);
    assert_eq!((sine.schedule.interval, sine.teacher.periods[0]), (0.1, 1.2));
    let ipc = golden(Scenario::IpcSensors);
    assert_eq!((ipc.ipc.max_delay, ipc.ipc.max_degree, ipc.ipc.samples), (10, 4, 50_000));
    let log = golden(Scenario::EmbedLogistic);
    assert_eq!((log.schedule.interval, log.teacher.logistic.a, log.esn.nodes), (0.2, 3.7, 100));
}
