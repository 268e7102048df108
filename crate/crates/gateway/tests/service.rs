use std::time::Duration;

use futures::StreamExt;
use stratus_core::catalog::fixture_catalog;
use stratus_core::execution::{Backend, JobState};
use stratus_core::governance::{GovernanceConfig, Group};
use stratus_core::Money;
use stratus_gateway::cli::parse_run_command;
use stratus_gateway::config::{bootstrap_governance, GatewayConfig};
use stratus_gateway::{Gateway, GatewayError, RunRequest, StatusEvent, Submission};

const OWNER: &str = "alice";

fn governance() -> GovernanceConfig {
    let mut g = bootstrap_governance(OWNER);
    // bob belongs to the workspace but holds no grants
    g.groups.push(Group {
        id: "visitors".into(),
        members: vec!["bob".into()],
    });
    g.workspaces[0].member_groups.push("visitors".into());
    g
}

fn gateway(dir: &std::path::Path, scale: f64) -> Gateway {
    let mut cfg = GatewayConfig::with_data_dir(dir);
    cfg.sim_time_scale = scale;
    Gateway::new(&cfg, fixture_catalog(), governance()).unwrap()
}

fn job_id(s: Submission) -> String {
    match s {
        Submission::Queued { job_id, .. } => job_id.0,
        other => panic!("expected a queued job, got {other:?}"),
    }
}

fn states(events: &[StatusEvent]) -> Vec<JobState> {
    events.iter().map(|e| e.state).collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn local_job_runs_to_success_with_full_history() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(dir.path(), 0.0);
    let req = parse_run_command(&[
        "run",
        "--setup",
        "echo prepared",
        "--backend",
        "local",
        "echo ok",
    ])
    .unwrap();
    let id = job_id(gw.submit(&req, OWNER).unwrap());
    let view = gw.wait(&id, OWNER).await.unwrap();
    assert_eq!(view.state, JobState::Succeeded, "{:?}", view.error);
    assert_eq!(
        states(&view.events),
        vec![
            JobState::Queued,
            JobState::Provisioning,
            JobState::Setup,
            JobState::Running,
            JobState::Collecting,
            JobState::Succeeded
        ]
    );
    let seqs: Vec<u64> = view.events.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (0..6).collect::<Vec<_>>());
    let log = gw.logs(&id, OWNER).unwrap();
    assert!(log.contains("prepared") && log.contains("ok"), "{log}");
    let record = gw.record(&id, OWNER).unwrap();
    assert_eq!(Some(record.record_id.clone()), view.record_id);
    record.verify().unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unauthorized_submission_creates_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(dir.path(), 0.0);
    let before = gw.budgets(OWNER);
    let err = gw
        .submit(&RunRequest::command("echo hi"), "bob")
        .unwrap_err();
    assert_eq!(err.kind(), "permission_denied");
    let err = gw
        .submit(&RunRequest::command("echo hi"), "mallory")
        .unwrap_err();
    assert_eq!(err.kind(), "permission_denied");
    assert!(gw.jobs(OWNER, None).is_empty());
    assert_eq!(gw.budgets(OWNER), before);
    // the ad-hoc template is registered only for admitted jobs
    assert_eq!(gw.templates().len(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn dry_run_prices_the_gpu_example_without_reserving() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(dir.path(), 0.0);
    let before = gw.budget("default", OWNER).unwrap();
    let req = parse_run_command(&[
        "run",
        "--gpu",
        "1",
        "--ram",
        "32",
        "--dry-run",
        "python train.py",
    ])
    .unwrap();
    let Submission::DryRun(report) = gw.submit(&req, OWNER).unwrap() else {
        panic!("dry run expected");
    };
    assert_eq!(report.plan.instance.name, "g6.2xlarge");
    assert!(report.estimate > Money::ZERO);
    assert_eq!(gw.budget("default", OWNER).unwrap(), before);
    assert!(gw.jobs(OWNER, None).is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn infeasible_requirements_are_rejected_before_admission() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(dir.path(), 0.0);
    let req = parse_run_command(&["run", "--gpu", "64", "python train.py"]).unwrap();
    let err = gw.submit(&req, OWNER).unwrap_err();
    assert_eq!(err.kind(), "no_feasible_instance");
    assert!(gw.jobs(OWNER, None).is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn budget_exhaustion_refuses_the_job() {
    let dir = tempfile::tempdir().unwrap();
    let mut g = governance();
    g.budgets[0].allocation = Money::from_usd(0.5);
    let gw = Gateway::new(
        &GatewayConfig::with_data_dir(dir.path()),
        fixture_catalog(),
        g,
    )
    .unwrap();
    let req =
        parse_run_command(&["run", "--template", "pism-greenland", "--param", "np=64"]).unwrap();
    let err = gw.submit(&req, OWNER).unwrap_err();
    assert!(matches!(err, GatewayError::BudgetExhausted { .. }), "{err}");
    assert!(gw.jobs(OWNER, None).is_empty());
    assert_eq!(gw.budget("default", OWNER).unwrap().reserved, Money::ZERO);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn simulated_template_job_settles_its_cost() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(dir.path(), 0.0);
    let req =
        parse_run_command(&["run", "--template", "pism-greenland", "--param", "np=64"]).unwrap();
    let id = job_id(gw.submit(&req, OWNER).unwrap());
    let view = gw.wait(&id, OWNER).await.unwrap();
    assert_eq!(view.state, JobState::Succeeded);
    assert_eq!(view.plan.backend, Backend::Simulated);
    let mpi = view.mpi.as_ref().unwrap();
    assert_eq!((mpi.np, mpi.grid.nx, mpi.grid.ny), (64, 8, 8));
    let b = gw.budget("default", OWNER).unwrap();
    assert_eq!(b.reserved, Money::ZERO);
    assert_eq!(Some(b.spent), view.cost);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cancelling_a_running_job_ends_cancelled() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(dir.path(), 0.0);
    let req = parse_run_command(&["run", "--backend", "local", "sleep 30"]).unwrap();
    let id = job_id(gw.submit(&req, OWNER).unwrap());
    let stream = gw.status_stream(&id, OWNER, None).unwrap();
    futures::pin_mut!(stream);
    while let Some(ev) = stream.next().await {
        if ev.state == JobState::Running {
            break;
        }
    }
    let started = std::time::Instant::now();
    gw.cancel(&id, OWNER).unwrap();
    let view = tokio::time::timeout(Duration::from_secs(10), gw.wait(&id, OWNER))
        .await
        .expect("cancellation is prompt")
        .unwrap();
    assert_eq!(view.state, JobState::Cancelled);
    assert!(started.elapsed() < Duration::from_secs(10));
    let err = gw.cancel(&id, OWNER).unwrap_err();
    assert_eq!(err.kind(), "conflict");
    assert_eq!(gw.budget("default", OWNER).unwrap().reserved, Money::ZERO);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn subscribers_observe_identical_sequences() {
    let dir = tempfile::tempdir().unwrap();
    // a small time scale keeps the job alive long enough to subscribe mid-flight
    let gw = gateway(dir.path(), 1e-5);
    let req =
        parse_run_command(&["run", "--template", "pism-greenland", "--param", "np=16"]).unwrap();
    let id = job_id(gw.submit(&req, OWNER).unwrap());
    let collect = |gw: Gateway, id: String| async move {
        let s = gw.status_stream(&id, OWNER, None).unwrap();
        s.collect::<Vec<_>>().await
    };
    let (a, b) = tokio::join!(
        tokio::spawn(collect(gw.clone(), id.clone())),
        tokio::spawn(collect(gw.clone(), id.clone()))
    );
    let (a, b) = (a.unwrap(), b.unwrap());
    assert_eq!(a, b);
    assert_eq!(a.last().unwrap().state, JobState::Succeeded);
    // a late subscriber resuming after seq 2 gets exactly the tail
    let tail: Vec<_> = gw
        .status_stream(&id, OWNER, Some(2))
        .unwrap()
        .collect()
        .await;
    assert_eq!(tail, a[3..].to_vec());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_admissions_never_overspend() {
    let dir = tempfile::tempdir().unwrap();
    let mut g = governance();
    g.budgets[0].allocation = Money::from_usd(10.0);
    let gw = Gateway::new(
        &GatewayConfig::with_data_dir(dir.path()),
        fixture_catalog(),
        g,
    )
    .unwrap();
    let req =
        parse_run_command(&["run", "--template", "pism-greenland", "--param", "np=64"]).unwrap();
    let Submission::DryRun(report) = gw
        .submit(
            &RunRequest {
                dry_run: true,
                ..req.clone()
            },
            OWNER,
        )
        .unwrap()
    else {
        panic!("dry run expected")
    };
    let fits = Money::from_usd(10.0).micros() / report.estimate.micros();
    let handles: Vec<_> = (0..12)
        .map(|_| {
            let (gw, req) = (gw.clone(), req.clone());
            std::thread::spawn(move || gw.submit(&req, OWNER).is_ok())
        })
        .collect();
    let admitted = handles
        .into_iter()
        .map(|h| h.join().unwrap())
        .filter(|ok| *ok)
        .count();
    assert_eq!(admitted as i64, fits);
    assert_eq!(gw.jobs(OWNER, None).len() as i64, fits);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn finished_jobs_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let gw = gateway(dir.path(), 0.0);
        let req = parse_run_command(&["run", "--template", "icepack-ice-shelf"]).unwrap();
        let id = job_id(gw.submit(&req, OWNER).unwrap());
        gw.wait(&id, OWNER).await.unwrap();
        id
    };
    let gw = gateway(dir.path(), 0.0);
    let view = gw.job(&id, OWNER).unwrap();
    assert_eq!(view.state, JobState::Succeeded);
    assert_eq!(
        gw.budget("default", OWNER).unwrap().spent,
        view.cost.unwrap()
    );
    gw.record(&id, OWNER).unwrap().verify().unwrap();
    assert_eq!(gw.templates().len(), 2, "fixture templates are seeded once");
}
