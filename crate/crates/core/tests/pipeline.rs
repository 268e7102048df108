use std::collections::BTreeMap;

use chrono::Utc;

use stratus_core::backends::{
    local_execute, sim_execute, LocalOptions, SimParams, FIXTURE_CALIBRATION,
};
use stratus_core::catalog::fixture_catalog;
use stratus_core::execution::{
    build_mpi_envelope, plan_provisioning, Backend, Job, JobEvent, JobState,
};
use stratus_core::results::{compare_runs, record_run, RecordStore};
use stratus_core::workflow::{
    fixture_templates, render_commands, resolve_parameters, ParamValue, TemplateRegistry,
};

fn drive(job: &mut Job) {
    let t = Utc::now();
    for e in [
        JobEvent::ProvisionStarted,
        JobEvent::NodesReady,
        JobEvent::SetupDone,
        JobEvent::RunCompleted,
        JobEvent::OutputsStored,
    ] {
        job.apply(e, t).unwrap();
    }
}

#[test]
fn simulated_pism_parameter_study() {
    let registry = TemplateRegistry::in_memory();
    for t in fixture_templates() {
        registry.register(t).unwrap();
    }
    let template = registry.resolve("pism-greenland", None).unwrap();
    let params = SimParams::from_toml(FIXTURE_CALIBRATION).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = RecordStore::open(dir.path()).unwrap();

    let mut records = Vec::new();
    for q in [0.25, 0.5] {
        let mut overrides = BTreeMap::new();
        overrides.insert("q".to_string(), ParamValue::Number(q));
        overrides.insert("np".to_string(), ParamValue::Number(64.0));
        let resolved = resolve_parameters(&template, &overrides).unwrap();
        let commands = render_commands(&template, &resolved).unwrap();
        assert!(commands.run.contains(&format!("--q {q}")));

        let req = template.default_requirements.clone().unwrap();
        let plan = plan_provisioning(&req, &fixture_catalog(), Backend::Simulated).unwrap();
        assert_eq!(plan.instance.name, "hpc7a.48xlarge");
        let mpi = build_mpi_envelope(64, &plan).unwrap();
        assert_eq!(mpi.grid.to_string(), "(8,8)");

        let mut job = Job::new(
            template.version_ref(),
            template.environment.clone(),
            resolved,
            plan,
            Some(mpi),
            Utc::now(),
        );
        drive(&mut job);
        assert_eq!(job.replay().unwrap(), JobState::Succeeded);
        let outcome = sim_execute(64, 1, &params);
        assert!((outcome.wall_time_hours / 0.52 - 1.0).abs() <= 0.15);
        let rec = record_run(&job, &outcome, &[], Utc::now()).unwrap();
        store.put(&rec, Some(&job.id)).unwrap();
        records.push(rec);
    }

    assert_eq!(store.by_template("pism-greenland", None, None).len(), 2);
    let diff = compare_runs(&records[0], &records[1]);
    assert_eq!(diff.paths(), vec!["parameters.q"]);
}

#[test]
fn local_run_is_recorded_with_output_refs() {
    let template = stratus_core::workflow::WorkflowTemplate::ad_hoc(
        Some("echo prepared > input.txt"),
        "cat input.txt > outputs/result.txt && echo finished",
    );
    let resolved = resolve_parameters(&template, &BTreeMap::new()).unwrap();
    let commands = render_commands(&template, &resolved).unwrap();
    let plan = plan_provisioning(&Default::default(), &fixture_catalog(), Backend::Local).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = local_execute(&commands, dir.path(), &LocalOptions::default()).unwrap();
    assert!(outcome.log_text.contains("finished"));
    assert_eq!(outcome.output_refs, vec!["outputs/result.txt".to_string()]);

    let mut job = Job::new(
        template.version_ref(),
        template.environment.clone(),
        resolved,
        plan,
        None,
        Utc::now(),
    );
    drive(&mut job);
    let rec = record_run(&job, &outcome, &[], Utc::now()).unwrap();
    assert_eq!(rec.body.outcome.outputs.len(), 1);
    assert_eq!(rec.body.template_version.name, template.name);
}
