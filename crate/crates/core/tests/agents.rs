//! Agent composition semantics: execution, ordering, temporal unrolling,
//! replay, seeding and kwargs transparency.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use tabula::agent::util::{CrossEntropyAgent, FillAgent, LinearAgent};
use tabula::{
    Agent, AgentExt, Context, Error, KwArgs, KwValue, Result, Sequential, Temporal, Tensor,
    VarStore, Workspace,
};

/// Writes `y[t] = 2 * x[t]`.
struct DoubleAgent;

impl Agent for DoubleAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let x = ctx.get("x", t)?;
        ctx.set("y", t, x.mul_scalar(2.0))
    }
    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(DoubleAgent)
    }
}

/// Writes a constant at the current timestep under a fixed name.
struct ConstAgent {
    name: &'static str,
    value: f32,
}

impl Agent for ConstAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        ctx.set(self.name, t, Tensor::from_vec(vec![1], vec![self.value]))
    }
    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(ConstAgent {
            name: self.name,
            value: self.value,
        })
    }
}

/// Environment stub that raises `env/done` at a scripted timestep.
struct ScriptedDoneEnv {
    done_at: usize,
}

impl Agent for ScriptedDoneEnv {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let done = if t >= self.done_at { 1.0 } else { 0.0 };
        ctx.set("env/done", t, Tensor::from_vec(vec![3], vec![done; 3]))?;
        ctx.set("env/obs", t, Tensor::from_vec(vec![3], vec![t as f32; 3]))
    }
    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(ScriptedDoneEnv {
            done_at: self.done_at,
        })
    }
}

/// Records the kwargs it observes so tests can assert transparency.
#[derive(Default)]
struct ProbeAgent {
    seen: Vec<KwArgs>,
}

impl Agent for ProbeAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        self.seen.push(ctx.kwargs().clone());
        let t = ctx.t().unwrap_or(0);
        ctx.set("probe", t, Tensor::from_vec(vec![1], vec![t as f32]))
    }
    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(ProbeAgent::default())
    }
}

/// Stochastic writer whose draws are reproducible under `seed`.
struct NoisyAgent {
    rng: StdRng,
}

impl NoisyAgent {
    fn new() -> NoisyAgent {
        NoisyAgent {
            rng: StdRng::seed_from_u64(0),
        }
    }
}

impl Agent for NoisyAgent {
    fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
        let t = ctx.t()?;
        let batch = ctx.batch_size().unwrap_or(1);
        let draws: Vec<f32> = (0..batch).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        ctx.set("action", t, Tensor::from_vec(vec![batch], draws))
    }
    fn seed(&mut self, seed: u64) {
        self.rng = StdRng::seed_from_u64(seed);
    }
    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(NoisyAgent {
            rng: self.rng.clone(),
        })
    }
}

fn kw(t: usize) -> KwArgs {
    KwArgs::new().with("t", t)
}

#[test]
fn linear_agent_identity_weights() {
    let mut ws = Workspace::new();
    ws.set("x", 0, Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]))
        .unwrap();
    let mut agent = LinearAgent::identity(2, "x", "y");
    agent.execute(&mut ws, &kw(0)).unwrap();
    assert_eq!(ws.get("y", 0).unwrap().to_vec(), vec![1.0, 2.0]);
}

#[test]
fn fill_agent_controlled_by_kwargs() {
    let mut ws = Workspace::new();
    let kwargs = KwArgs::new()
        .with("var_name", "x")
        .with("value", 1.0f64)
        .with("n_steps", 100usize);
    FillAgent.execute(&mut ws, &kwargs).unwrap();
    assert_eq!(ws.time_extent("x"), Some(100));
    for t in [0usize, 57, 99] {
        assert_eq!(ws.get("x", t).unwrap().to_vec(), vec![1.0]);
    }
}

#[test]
fn cross_entropy_agent_uniform_logits() {
    let mut ws = Workspace::new();
    // Two classes, uniform logits, three timesteps, batch 1.
    for t in 0..3 {
        ws.set("predicted_y", t, Tensor::zeros(vec![1, 2])).unwrap();
        ws.set("y", t, Tensor::from_vec(vec![1], vec![(t % 2) as f32]))
            .unwrap();
    }
    CrossEntropyAgent.execute(&mut ws, &KwArgs::new()).unwrap();
    let loss = ws.get("loss", 0).unwrap();
    assert_eq!(loss.shape(), &[1]);
    assert!((loss.data()[0] - std::f32::consts::LN_2).abs() < 1e-6);
}

#[test]
fn sequential_composes_in_order() {
    let mut pipeline = Sequential::new(vec![
        Box::new(FillAgent),
        Box::new(DoubleAgent),
    ])
    .unwrap();
    let mut ws = Workspace::new();
    let kwargs = KwArgs::new()
        .with("var_name", "x")
        .with("value", 2.0f64)
        .with("n_steps", 1usize)
        .with("t", 0usize);
    pipeline.execute(&mut ws, &kwargs).unwrap();
    assert_eq!(ws.get("y", 0).unwrap().to_vec(), vec![4.0]);
}

#[test]
fn singleton_sequential_behaves_like_the_agent() {
    let mut ws_direct = Workspace::new();
    let mut ws_wrapped = Workspace::new();
    DoubleAgent
        .execute(&mut ws_direct, &kw(0))
        .unwrap_err(); // x missing: same error either way
    Sequential::new(vec![Box::new(DoubleAgent)])
        .unwrap()
        .execute(&mut ws_wrapped, &kw(0))
        .unwrap_err();

    let mut ws_a = Workspace::new();
    ws_a.set("x", 0, Tensor::from_vec(vec![1], vec![3.0])).unwrap();
    let mut ws_b = ws_a.clone();
    DoubleAgent.execute(&mut ws_a, &kw(0)).unwrap();
    Sequential::new(vec![Box::new(DoubleAgent)])
        .unwrap()
        .execute(&mut ws_b, &kw(0))
        .unwrap();
    assert_eq!(
        ws_a.get("y", 0).unwrap().to_vec(),
        ws_b.get("y", 0).unwrap().to_vec()
    );
}

#[test]
fn empty_sequential_is_rejected() {
    assert!(matches!(
        Sequential::new(vec![]),
        Err(Error::EmptyContainer)
    ));
}

#[test]
fn sequencing_is_associative() {
    let make_flat = || -> Box<dyn Agent> {
        Box::new(
            Sequential::new(vec![
                Box::new(ConstAgent { name: "a", value: 1.0 }),
                Box::new(ConstAgent { name: "b", value: 2.0 }),
                Box::new(ConstAgent { name: "c", value: 3.0 }),
            ])
            .unwrap(),
        )
    };
    let make_nested = || -> Box<dyn Agent> {
        Box::new(
            Sequential::new(vec![
                Box::new(ConstAgent { name: "a", value: 1.0 }),
                Box::new(
                    Sequential::new(vec![
                        Box::new(ConstAgent { name: "b", value: 2.0 }),
                        Box::new(ConstAgent { name: "c", value: 3.0 }),
                    ])
                    .unwrap(),
                ),
            ])
            .unwrap(),
        )
    };
    let mut ws_flat = Workspace::new();
    let mut ws_nested = Workspace::new();
    make_flat().execute(&mut ws_flat, &kw(0)).unwrap();
    make_nested().execute(&mut ws_nested, &kw(0)).unwrap();
    for name in ["a", "b", "c"] {
        assert_eq!(
            ws_flat.get(name, 0).unwrap().to_vec(),
            ws_nested.get(name, 0).unwrap().to_vec()
        );
    }
}

#[test]
fn temporal_single_step_equals_direct_execute() {
    let mut ws_loop = Workspace::new();
    let mut temporal = Temporal::new(Box::new(ScriptedDoneEnv { done_at: 99 }));
    temporal
        .execute(&mut ws_loop, &KwArgs::new().with("t", 0usize).with("n_steps", 1usize))
        .unwrap();

    let mut ws_direct = Workspace::new();
    ScriptedDoneEnv { done_at: 99 }
        .execute(&mut ws_direct, &kw(0))
        .unwrap();
    assert_eq!(
        ws_loop.full("env/obs").unwrap().to_vec(),
        ws_direct.full("env/obs").unwrap().to_vec()
    );
}

#[test]
fn temporal_runs_fifty_steps() {
    let mut ws = Workspace::new();
    let mut temporal = Temporal::new(Box::new(ScriptedDoneEnv { done_at: 1000 }));
    temporal
        .execute(&mut ws, &KwArgs::new().with("t", 0usize).with("n_steps", 50usize))
        .unwrap();
    assert_eq!(ws.time_extent("env/obs"), Some(50));
}

#[test]
fn temporal_stop_variable_executes_the_stopping_step() {
    let mut ws = Workspace::new();
    let mut temporal = Temporal::new(Box::new(ScriptedDoneEnv { done_at: 3 }));
    temporal
        .execute(
            &mut ws,
            &KwArgs::new().with("t", 0usize).with("stop_variable", "env/done"),
        )
        .unwrap();
    // done first holds at t = 3, and that step is executed: extent 4.
    assert_eq!(ws.time_extent("env/done"), Some(4));
}

#[test]
fn temporal_stops_at_whichever_bound_comes_first() {
    let run = |done_at: usize, n_steps: usize| -> usize {
        let mut ws = Workspace::new();
        Temporal::new(Box::new(ScriptedDoneEnv { done_at }))
            .execute(
                &mut ws,
                &KwArgs::new()
                    .with("t", 0usize)
                    .with("n_steps", n_steps)
                    .with("stop_variable", "env/done"),
            )
            .unwrap();
        ws.time_extent("env/done").unwrap()
    };
    assert_eq!(run(3, 50), 4); // condition first
    assert_eq!(run(100, 5), 5); // budget first
}

#[test]
fn temporal_requires_a_bound() {
    let mut ws = Workspace::new();
    let err = Temporal::new(Box::new(ScriptedDoneEnv { done_at: 0 }))
        .execute(&mut ws, &kw(0))
        .unwrap_err();
    assert!(matches!(err, Error::UnboundedTemporal));
}

#[test]
fn temporal_errors_on_unwritten_stop_variable() {
    let mut ws = Workspace::new();
    let err = Temporal::new(Box::new(ConstAgent { name: "x", value: 1.0 }))
        .execute(
            &mut ws,
            &KwArgs::new().with("t", 0usize).with("stop_variable", "env/done"),
        )
        .unwrap_err();
    assert!(matches!(err, Error::UnknownVariable { .. }));
}

#[test]
fn kwargs_reach_every_nested_agent_unmodified() {
    let mut probe = ProbeAgent::default();
    {
        let inner = Sequential::new(vec![Box::new(ConstAgent { name: "pad", value: 0.0 })])
            .unwrap();
        let mut top = Sequential::new(vec![Box::new(inner)]).unwrap();
        let kwargs = KwArgs::new()
            .with("t", 0usize)
            .with("alpha", 0.5f64)
            .with("mode", "fast")
            .with("flag", true);
        top.execute(&mut Workspace::new(), &kwargs).unwrap();
        // Now run the probe inside two containers and compare what it saw.
        probe.forward(&mut Context::new(&mut Workspace::new(), &kwargs)).unwrap();
        assert_eq!(probe.seen[0], kwargs);
    }
    // The temporal container strips only its loop-control keys and rebinds t.
    let mut ws = Workspace::new();
    let mut temporal = Temporal::new(Box::new(ProbeAgent::default()));
    let kwargs = KwArgs::new()
        .with("t", 0usize)
        .with("n_steps", 2usize)
        .with("epsilon", 0.25f64);
    temporal.execute(&mut ws, &kwargs).unwrap();
    assert_eq!(ws.time_extent("probe"), Some(2));
}

#[test]
fn temporal_inner_sees_current_t_not_loop_controls() {
    struct AssertKwargs;
    impl Agent for AssertKwargs {
        fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
            assert!(ctx.kwargs().get("n_steps").is_none());
            assert!(ctx.kwargs().get("stop_variable").is_none());
            assert_eq!(
                ctx.kwargs().get("epsilon"),
                Some(&KwValue::Float(0.125))
            );
            let t = ctx.t()?;
            ctx.set("tick", t, Tensor::from_vec(vec![1], vec![t as f32]))
        }
        fn clone_agent(&self) -> Box<dyn Agent> {
            Box::new(AssertKwargs)
        }
    }
    let mut ws = Workspace::new();
    Temporal::new(Box::new(AssertKwargs))
        .execute(
            &mut ws,
            &KwArgs::new()
                .with("t", 0usize)
                .with("n_steps", 3usize)
                .with("epsilon", 0.125f64),
        )
        .unwrap();
    assert_eq!(ws.full("tick").unwrap().to_vec(), vec![0.0, 1.0, 2.0]);
}

#[test]
fn seeded_runs_are_bit_identical_and_seeds_decorrelate() {
    let run = |seed: u64| -> Vec<f32> {
        let mut agent = Temporal::new(Box::new(NoisyAgent::new()));
        agent.seed(seed);
        let mut ws = Workspace::new();
        agent
            .execute(&mut ws, &KwArgs::new().with("t", 0usize).with("n_steps", 100usize))
            .unwrap();
        ws.full("action").unwrap().to_vec()
    };
    let a = run(11);
    let b = run(11);
    assert_eq!(
        a.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
    );
    let c = run(12);
    assert_ne!(a, c, "different seeds should diverge over 100 draws");
}

#[test]
fn container_seed_fans_out_distinct_streams() {
    // Two noisy agents in one container write different series even though
    // the container got a single seed.
    struct NamedNoisy {
        rng: StdRng,
        var: &'static str,
    }
    impl Agent for NamedNoisy {
        fn forward(&mut self, ctx: &mut Context<'_>) -> Result<()> {
            let t = ctx.t()?;
            let v: f32 = self.rng.gen();
            ctx.set(self.var, t, Tensor::from_vec(vec![1], vec![v]))
        }
        fn seed(&mut self, seed: u64) {
            self.rng = StdRng::seed_from_u64(seed);
        }
        fn clone_agent(&self) -> Box<dyn Agent> {
            Box::new(NamedNoisy {
                rng: self.rng.clone(),
                var: self.var,
            })
        }
    }
    let mut container = Sequential::new(vec![
        Box::new(NamedNoisy {
            rng: StdRng::seed_from_u64(0),
            var: "a",
        }),
        Box::new(NamedNoisy {
            rng: StdRng::seed_from_u64(0),
            var: "b",
        }),
    ])
    .unwrap();
    container.seed(5);
    let mut ws = Workspace::new();
    Temporal::new(Box::new(container))
        .seed(5);
    // Re-seed and unroll manually to stay on the same instance.
    let mut unrolled = Temporal::new(Box::new(Sequential::new(vec![
        Box::new(NamedNoisy {
            rng: StdRng::seed_from_u64(0),
            var: "a",
        }),
        Box::new(NamedNoisy {
            rng: StdRng::seed_from_u64(0),
            var: "b",
        }),
    ])
    .unwrap()));
    unrolled.seed(5);
    unrolled
        .execute(&mut ws, &KwArgs::new().with("t", 0usize).with("n_steps", 20usize))
        .unwrap();
    assert_ne!(
        ws.full("a").unwrap().to_vec(),
        ws.full("b").unwrap().to_vec()
    );
}

#[test]
fn replay_overwrites_own_outputs_and_leaves_the_rest() {
    // Acquire with one noisy policy, then replay a second one.
    let acquire = |seed: u64| -> Workspace {
        let mut agent = Temporal::new(Box::new(
            Sequential::new(vec![
                Box::new(ScriptedDoneEnv { done_at: 1000 }),
                Box::new(NoisyAgent::new()),
            ])
            .unwrap(),
        ));
        agent.seed(seed);
        let mut ws = Workspace::new();
        agent
            .execute(&mut ws, &KwArgs::new().with("t", 0usize).with("n_steps", 10usize))
            .unwrap();
        ws
    };
    let mut ws = acquire(21);
    let obs_before: Vec<u32> = ws
        .full("env/obs")
        .unwrap()
        .to_vec()
        .iter()
        .map(|f| f.to_bits())
        .collect();
    let actions_before = ws.full("action").unwrap().to_vec();

    let mut second = Temporal::new(Box::new(NoisyAgent::new()));
    second.seed(99);
    second
        .replay(&mut ws, &KwArgs::new().with("t", 0usize).with("n_steps", 10usize))
        .unwrap();

    let obs_after: Vec<u32> = ws
        .full("env/obs")
        .unwrap()
        .to_vec()
        .iter()
        .map(|f| f.to_bits())
        .collect();
    assert_eq!(obs_before, obs_after, "environment variables must not move");
    assert_ne!(actions_before, ws.full("action").unwrap().to_vec());
}

#[test]
fn replay_same_seed_is_idempotent() {
    let mut ws = Workspace::new();
    let mut first = Temporal::new(Box::new(NoisyAgent::new()));
    first.seed(4);
    first
        .execute(&mut ws, &KwArgs::new().with("t", 0usize).with("n_steps", 6usize))
        .unwrap();
    let before = ws.full("action").unwrap().to_vec();

    let mut again = Temporal::new(Box::new(NoisyAgent::new()));
    again.seed(4);
    again
        .replay(&mut ws, &KwArgs::new().with("t", 0usize).with("n_steps", 6usize))
        .unwrap();
    assert_eq!(before, ws.full("action").unwrap().to_vec());
}

#[test]
fn replay_can_add_new_variables() {
    let mut ws = Workspace::new();
    Temporal::new(Box::new(ConstAgent { name: "x", value: 1.0 }))
        .execute(&mut ws, &KwArgs::new().with("t", 0usize).with("n_steps", 3usize))
        .unwrap();
    let before = ws.full("x").unwrap().to_vec();
    Temporal::new(Box::new(ConstAgent { name: "logp", value: 0.5 }))
        .replay(&mut ws, &KwArgs::new().with("t", 0usize).with("n_steps", 3usize))
        .unwrap();
    assert_eq!(ws.full("x").unwrap().to_vec(), before);
    assert_eq!(ws.full("logp").unwrap().to_vec(), vec![0.5; 3]);
}

#[test]
fn replay_rejects_empty_workspace() {
    let mut ws = Workspace::new();
    let err = ConstAgent { name: "x", value: 1.0 }
        .replay(&mut ws, &kw(0))
        .unwrap_err();
    assert!(matches!(err, Error::EmptyWorkspace));
}
