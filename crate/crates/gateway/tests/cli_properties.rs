use std::collections::BTreeMap;

use proptest::prelude::*;
use stratus_core::catalog::ResourceRequirements;
use stratus_core::execution::Backend;
use stratus_gateway::cli::{parse_run_command, RunRequest, TemplateRef};

fn word() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_.-]{0,10}"
}

fn command() -> impl Strategy<Value = String> {
    // anything non-blank, including spaces, quotes and leading dashes
    "[ -~]{0,30}".prop_filter("non-blank", |s| !s.trim().is_empty())
}

fn request() -> impl Strategy<Value = RunRequest> {
    let source = prop_oneof![
        (command(), proptest::option::of(command())).prop_map(|(run, setup)| (
            Some(run),
            setup,
            None
        )),
        (word(), proptest::option::of(1u32..9)).prop_map(|(name, version)| (
            None,
            None,
            Some(TemplateRef { name, version })
        )),
    ];
    let reqs = (
        proptest::option::of(0u32..9),
        proptest::option::of(0u32..2048).prop_map(|m| m.map(|m| f64::from(m) / 4.0)),
        proptest::option::of(1u32..200),
        proptest::option::of(prop_oneof![Just("aws"), Just("gcp"), Just("azure")]),
        proptest::option::of(word()),
        1u32..9,
    )
        .prop_map(|(g, m, v, p, t, n)| ResourceRequirements {
            min_gpus: g,
            min_memory_gib: m,
            min_vcpus: v,
            provider: p.map(|p| p.parse().unwrap()),
            instance_type: t,
            num_nodes: n,
            max_price_per_hour: None,
        });
    (
        source,
        reqs,
        proptest::collection::btree_map(word(), "[ -~]{0,12}", 0..4),
        prop_oneof![Just(Backend::Simulated), Just(Backend::Local)],
        word(),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(
            |(
                (run, setup, template),
                requirements,
                overrides,
                backend,
                workspace,
                dry_run,
                wait,
            )| RunRequest {
                run_command: run,
                setup_command: setup,
                requirements,
                template_ref: template,
                overrides: overrides.into_iter().collect::<BTreeMap<_, _>>(),
                backend,
                workspace,
                dry_run,
                wait,
            },
        )
}

fn token() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("--setup".to_string()),
        Just("--gpu".to_string()),
        Just("--ram".to_string()),
        Just("--cloud".to_string()),
        Just("--num-nodes".to_string()),
        Just("--instance-type".to_string()),
        Just("--template".to_string()),
        Just("--param".to_string()),
        Just("--dry-run".to_string()),
        Just("--".to_string()),
        "-{0,2}[a-z0-9=.:-]{0,8}",
        "[ -~]{0,12}",
    ]
}

proptest! {
    #[test]
    fn argv_round_trips(req in request()) {
        let argv = req.to_argv();
        prop_assert_eq!(parse_run_command(&argv), Ok(req));
    }

    #[test]
    fn arbitrary_tokens_parse_or_fail_cleanly(tokens in proptest::collection::vec(token(), 0..10)) {
        let argv: Vec<String> = std::iter::once("run".to_string()).chain(tokens).collect();
        match parse_run_command(&argv) {
            Ok(req) => {
                // exactly one command source, and the result is stable under re-rendering
                prop_assert!(req.run_command.is_some() != req.template_ref.is_some());
                prop_assert_eq!(parse_run_command(&req.to_argv()), Ok(req));
            }
            Err(e) => prop_assert!(!e.to_string().is_empty()),
        }
    }
}
