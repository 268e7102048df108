use std::net::SocketAddr;
use std::sync::mpsc;
use std::thread::JoinHandle;

use stratus_core::execution::JobState;
use stratus_core::workflow::fixture_templates;
use stratus_core::Money;
use stratus_gateway::cli::parse_run_command;
use stratus_gateway::client::Client;
use stratus_gateway::config::GatewayConfig;
use stratus_gateway::http::{serve, USER_HEADER};
use stratus_gateway::{Gateway, Submission};
use tokio::sync::oneshot;

const OWNER: &str = "alice";

/// A gateway on an ephemeral port, served from its own runtime thread.
struct Server {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
    _dir: tempfile::TempDir,
}

impl Server {
    fn start(sim_time_scale: f64) -> Server {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GatewayConfig::with_data_dir(dir.path());
        cfg.sim_time_scale = sim_time_scale;
        let (addr_tx, addr_rx) = mpsc::channel();
        let (stop, stop_rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let gw = Gateway::from_config(&cfg, OWNER).unwrap();
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                serve(gw, listener, async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
        });
        Server {
            addr: addr_rx.recv().unwrap(),
            stop: Some(stop),
            thread: Some(thread),
            _dir: dir,
        }
    }

    fn client(&self, user: &str) -> Client {
        Client::new(&self.addr.to_string(), user)
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn submit(c: &Client, argv: &[&str]) -> String {
    match c.submit(&parse_run_command(argv).unwrap()).unwrap() {
        Submission::Queued { job_id, .. } => job_id.0,
        other => panic!("expected a queued job, got {other:?}"),
    }
}

#[test]
fn job_lifecycle_over_http() {
    let server = Server::start(0.0);
    let c = server.client(OWNER);
    assert_eq!(c.health().unwrap()["status"], "ok");

    let id = submit(
        &c,
        &[
            "run",
            "--setup",
            "echo staged",
            "--backend",
            "local",
            "echo done",
        ],
    );
    let mut seen = Vec::new();
    let view = c.follow(&id, |ev| seen.push(ev.state)).unwrap();
    assert_eq!(view.state, JobState::Succeeded);
    assert_eq!(seen.first(), Some(&JobState::Queued));
    assert_eq!(seen.last(), Some(&JobState::Succeeded));
    assert!(c.logs(&id).unwrap().contains("done"));
    let record = c.record(&id).unwrap();
    record.verify().unwrap();
    assert_eq!(Some(record.record_id), view.record_id);

    let jobs = c.jobs(None).unwrap();
    assert_eq!(jobs.len(), 1);
    assert_eq!(jobs[0].id.0, id);
    assert!(c.jobs(Some("elsewhere")).unwrap().is_empty());
}

#[test]
fn create_job_answers_201_and_errors_carry_kinds() {
    let server = Server::start(0.0);
    let http = reqwest::blocking::Client::new();
    let req = parse_run_command(&["run", "--template", "icepack-ice-shelf"]).unwrap();

    let resp = http
        .post(server.url("/v1/jobs"))
        .header(USER_HEADER, OWNER)
        .json(&req)
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 201);

    let resp = http.post(server.url("/v1/jobs")).json(&req).send().unwrap();
    assert_eq!(resp.status().as_u16(), 401);

    let resp = http
        .post(server.url("/v1/jobs"))
        .header(USER_HEADER, "mallory")
        .json(&req)
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 403);
    let body: serde_json::Value = resp.json().unwrap();
    assert_eq!(body["error"], "permission_denied");

    let gpu = parse_run_command(&["run", "--gpu", "64", "train"]).unwrap();
    let resp = http
        .post(server.url("/v1/jobs"))
        .header(USER_HEADER, OWNER)
        .json(&gpu)
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 422);

    let err = server.client(OWNER).job("no-such-job").unwrap_err();
    assert_eq!(err.kind(), "not_found");

    let dry = parse_run_command(&[
        "run",
        "--gpu",
        "1",
        "--ram",
        "32",
        "--dry-run",
        "python train.py",
    ])
    .unwrap();
    let resp = http
        .post(server.url("/v1/jobs"))
        .header(USER_HEADER, OWNER)
        .json(&dry)
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    let body: serde_json::Value = resp.json().unwrap();
    assert_eq!(body["status"], "dry_run");
    assert_eq!(body["plan"]["instance"]["name"], "g6.2xlarge");
}

#[test]
fn event_stream_resumes_after_last_event_id() {
    let server = Server::start(0.0);
    let c = server.client(OWNER);
    let id = submit(
        &c,
        &["run", "--template", "pism-greenland", "--param", "np=64"],
    );
    let full: Vec<_> = c.events(&id, None).unwrap().map(Result::unwrap).collect();
    assert_eq!(full.last().unwrap().state, JobState::Succeeded);
    assert_eq!(
        full.iter().map(|e| e.seq).collect::<Vec<_>>(),
        (0..full.len() as u64).collect::<Vec<_>>()
    );

    // drop the connection after two events, reconnect with Last-Event-ID
    let first: Vec<_> = c
        .events(&id, None)
        .unwrap()
        .take(2)
        .map(Result::unwrap)
        .collect();
    let rest: Vec<_> = c
        .events(&id, Some(first.last().unwrap().seq))
        .unwrap()
        .map(Result::unwrap)
        .collect();
    let stitched: Vec<_> = first.into_iter().chain(rest).collect();
    assert_eq!(stitched, full);

    // the `after` query parameter is equivalent
    let http = reqwest::blocking::Client::new();
    let text = http
        .get(server.url(&format!("/v1/jobs/{id}/events?after=3")))
        .header(USER_HEADER, OWNER)
        .send()
        .unwrap()
        .text()
        .unwrap();
    let ids: Vec<u64> = text
        .lines()
        .filter_map(|l| l.strip_prefix("id:"))
        .map(|v| v.trim().parse().unwrap())
        .collect();
    assert_eq!(
        ids,
        full[4..].iter().map(|e| e.seq).collect::<Vec<_>>(),
        "{text}"
    );
}

#[test]
fn live_stream_follows_a_running_job() {
    // slow simulated time so the subscription starts before the job ends
    let server = Server::start(2e-5);
    let c = server.client(OWNER);
    let id = submit(
        &c,
        &["run", "--template", "pism-greenland", "--param", "np=32"],
    );
    let a = std::thread::spawn({
        let c = server.client(OWNER);
        let id = id.clone();
        move || {
            c.events(&id, None)
                .unwrap()
                .map(Result::unwrap)
                .collect::<Vec<_>>()
        }
    });
    let b: Vec<_> = c.events(&id, None).unwrap().map(Result::unwrap).collect();
    assert_eq!(a.join().unwrap(), b);
    assert_eq!(b.last().unwrap().state, JobState::Succeeded);
}

#[test]
fn templates_are_append_only() {
    let server = Server::start(0.0);
    let c = server.client(OWNER);
    let listed: Vec<String> = c
        .templates()
        .unwrap()
        .iter()
        .map(ToString::to_string)
        .collect();
    assert_eq!(listed, vec!["icepack-ice-shelf:1", "pism-greenland:1"]);

    let mut t = fixture_templates()
        .into_iter()
        .find(|t| t.name == "pism-greenland")
        .unwrap();
    let v1 = c.template("pism-greenland", Some(1)).unwrap();
    assert_eq!(v1.run_command, t.run_command);

    t.expected_wall_hours = Some(2.0);
    let v2 = c.register_template(&t, "default").unwrap();
    assert_eq!(v2.version, 2);
    assert_eq!(
        c.template("pism-greenland", None)
            .unwrap()
            .expected_wall_hours,
        Some(2.0)
    );
    assert_eq!(c.template("pism-greenland", Some(1)).unwrap(), v1);

    let http = reqwest::blocking::Client::new();
    let resp = http
        .delete(server.url("/v1/templates/pism-greenland"))
        .header(USER_HEADER, OWNER)
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 405);
    assert_eq!(c.template("pism-greenland", Some(1)).unwrap(), v1);

    let err = server
        .client("mallory")
        .register_template(&t, "default")
        .unwrap_err();
    assert_eq!(err.kind(), "permission_denied");

    let mut broken = t.clone();
    broken.run_command = "./run --q {{undeclared}}".into();
    let err = c.register_template(&broken, "default").unwrap_err();
    assert_eq!(err.kind(), "invalid_request");
    assert_eq!(c.template("nope", None).unwrap_err().kind(), "not_found");
}

#[test]
fn catalog_and_budgets_are_readable() {
    let server = Server::start(0.0);
    let c = server.client(OWNER);
    let cat = c.catalog().unwrap();
    let names: Vec<&str> = cat["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["name"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"g6.2xlarge") && names.contains(&"hpc7a.48xlarge"));
    let http = reqwest::blocking::Client::new();
    assert_eq!(
        http.post(server.url("/v1/catalog"))
            .send()
            .unwrap()
            .status()
            .as_u16(),
        405
    );

    let budgets = c.budgets().unwrap();
    assert_eq!(budgets.len(), 1);
    assert_eq!(budgets[0].allocation, Money::from_dollars(100));
    let id = submit(&c, &["run", "--template", "icepack-ice-shelf"]);
    let view = c.follow(&id, |_| {}).unwrap();
    let b = c.budget("default").unwrap();
    assert_eq!(b.spent, view.cost.unwrap());
    assert_eq!(b.reserved, Money::ZERO);
    assert!(server.client("mallory").budgets().unwrap().is_empty());
    assert_eq!(c.budget("missing").unwrap_err().kind(), "not_found");
}

#[test]
fn cancel_over_http() {
    let server = Server::start(0.0);
    let c = server.client(OWNER);
    let id = submit(&c, &["run", "--backend", "local", "sleep 30"]);
    for ev in c.events(&id, None).unwrap() {
        if ev.unwrap().state == JobState::Running {
            break;
        }
    }
    c.cancel(&id).unwrap();
    let view = c.follow(&id, |_| {}).unwrap();
    assert_eq!(view.state, JobState::Cancelled);
    assert_eq!(c.cancel(&id).unwrap_err().kind(), "conflict");
}
