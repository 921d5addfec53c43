use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use maskdp::ablation::{self, AblationKind, PretrainSetup};
use maskdp::baselines::{train_baseline, Baseline, BaselineConfig, BaselineKind, GptParams};
use maskdp::dataset::{collect, collect_mixed, collect_near_expert, collect_near_expert_domain, read_dataset, write_dataset, Dataset, PolicySpec};
use maskdp::downstream::rl::{rl_finetune, RlConfig, RlInit};
use maskdp::downstream::ExecMode;
use maskdp::env::{EnvId, TaskId};
use maskdp::eval::{build_prompts, build_queries, rl_rows, run_goal_eval, run_prompt_eval, write_rows, EvalRow, Method, Prompter, QuerySpec};
use maskdp::model::{ModelConfig, ModelParams};
use maskdp::pretrain::{pretrain, TrainConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "maskdp", version, about = "Masked trajectory models on toy control domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with partial overrides, keyed by section: data, model,
    /// train, rl, baseline, single_goal, multi_goal.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Recipe {
    NearExpert,
    Mixed,
    Random,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backbone {
    Maskdp,
    Gpt,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a dataset with one of the recipes.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        env: String,
        #[arg(long, value_enum)]
        recipe: Recipe,
        /// Restrict near-expert collection to one task.
        #[arg(long)]
        task: Option<String>,
    },
    /// Pretrain the masked model.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a gpt, goal_gpt or goal_mlp baseline.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        kind: String,
    },
    /// Single-goal reaching on a validation dataset.
    EvalGoal(GoalArgs),
    /// Multi-goal reaching on a validation dataset.
    EvalMultigoal(GoalArgs),
    /// Continue prompts cut from a single-task validation dataset.
    Prompt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// A gpt baseline checkpoint to evaluate alongside.
        #[arg(long)]
        gpt: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        horizon: usize,
        #[arg(long, value_enum, default_value_t = Mode::Closed)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        ckpt_step: usize,
    },
    /// Offline actor-critic finetuning of a causal backbone.
    FinetuneRl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, value_enum, default_value_t = Backbone::Maskdp)]
        backbone: Backbone,
        /// Pretrained backbone; a fresh one is used when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        steps: usize,
    },
    /// Run one ablation suite.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: String,
        /// Pretraining data (ratio, loss_mode, scale).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation data for queries or prompts (ratio, scale, foresight,
        /// horizon).
        #[arg(long)]
        val: Option<PathBuf>,
        /// Trained model (foresight, horizon).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Task of the validation data (horizon).
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        ckpt_step: usize,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Open,
    Closed,
}

impl From<Mode> for ExecMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Open => ExecMode::Open,
            Mode::Closed => ExecMode::Closed,
        }
    }
}

#[derive(Args)]
struct GoalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Goal-conditioned baseline checkpoints.
    #[arg(long)]
    baseline: Vec<PathBuf>,
    /// Also evaluate the uniform random policy.
    #[arg(long)]
    random: bool,
    #[arg(long, default_value_t = 0)]
    ckpt_step: usize,
}

/// Sizes of collected datasets.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
struct DataConfig {
    episodes_per_task: usize,
    mixed_episodes: usize,
    random_episodes: usize,
    ep_len: usize,
}

impl DataConfig {
    fn for_profile(_: Profile) -> Self {
        Self {
            episodes_per_task: 2000,
            mixed_episodes: 4000,
            random_episodes: 2000,
            ep_len: 200,
        }
    }
}

/// Profile defaults plus the sections of the optional JSON file.
struct Settings {
    profile: Profile,
    seed: u64,
    overrides: serde_json::Map<String, Value>,
}

const SECTIONS: [&str; 7] = ["data", "model", "train", "rl", "baseline", "single_goal", "multi_goal"];

impl Settings {
    fn load(common: &Common) -> Result<Self> {
        let overrides = match &common.config {
            None => serde_json::Map::new(),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                match serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))? {
                    Value::Object(m) => m,
                    _ => bail!("config must be a JSON object"),
                }
            }
        };
        if let Some(k) = overrides.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            bail!("unknown config section {k:?}; expected one of {SECTIONS:?}");
        }
        let s = Self {
            profile: common.profile,
            seed: common.seed,
            overrides,
        };
        // Surface bad fields before any work starts, whichever sections the
        // command reads.
        let env = EnvId::Pointmass;
        s.data()?;
        s.model(env)?;
        s.train()?;
        s.rl()?;
        s.baseline(BaselineKind::GoalMlp, env)?;
        s.queries(false)?;
        s.queries(true)?;
        Ok(s)
    }

    /// `base` with the named section's fields replaced.
    fn section<T: Serialize + DeserializeOwned>(&self, name: &str, base: T) -> Result<T> {
        let Some(patch) = self.overrides.get(name) else {
            return Ok(base);
        };
        let mut value = serde_json::to_value(&base)?;
        merge(&mut value, patch, name)?;
        serde_json::from_value(value).with_context(|| format!("config section {name}"))
    }

    fn data(&self) -> Result<DataConfig> {
        self.section("data", DataConfig::for_profile(self.profile))
    }

    fn model(&self, env: EnvId) -> Result<ModelConfig> {
        let (ds, da) = (env.state_dim(), env.action_dim());
        let base = match self.profile {
            Profile::Desk => ModelConfig::desk(ds, da),
            Profile::Paper => ModelConfig::paper(ds, da),
        };
        self.section("model", base)
    }

    fn train(&self) -> Result<TrainConfig> {
        let base = match self.profile {
            Profile::Desk => TrainConfig::desk(self.seed),
            Profile::Paper => TrainConfig::paper(self.seed),
        };
        let cfg: TrainConfig = self.section("train", base)?;
        Ok(TrainConfig { seed: self.seed, ..cfg })
    }

    fn rl(&self) -> Result<RlConfig> {
        let base = match self.profile {
            Profile::Desk => RlConfig::desk(),
            Profile::Paper => RlConfig::paper(),
        };
        self.section("rl", base)
    }

    fn baseline(&self, kind: BaselineKind, env: EnvId) -> Result<BaselineConfig> {
        let (ds, da) = (env.state_dim(), env.action_dim());
        let base = match self.profile {
            Profile::Desk => BaselineConfig::desk(kind, ds, da),
            Profile::Paper => BaselineConfig::paper(kind, ds, da),
        };
        let cfg: BaselineConfig = self.section("baseline", base)?;
        if cfg.kind != kind {
            bail!("config section baseline cannot change the kind");
        }
        Ok(cfg)
    }

    fn queries(&self, multi: bool) -> Result<QuerySpec> {
        if multi {
            self.section("multi_goal", QuerySpec::multi_goal())
        } else {
            self.section("single_goal", QuerySpec::single_goal())
        }
    }
}

/// Overwrites fields of `base` with those of `patch`, rejecting fields
/// `base` does not have.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let field = format!("{path}.{k}");
                let Some(slot) = b.get_mut(k) else {
                    bail!("unknown config field {field}");
                };
                merge(slot, v, &field)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    ModelParams::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn load_baseline(path: &Path) -> Result<Baseline> {
    Baseline::load(path).with_context(|| format!("reading baseline {}", path.display()))
}

fn load_gpt(path: &Path) -> Result<GptParams<f32>> {
    match load_baseline(path)? {
        Baseline::Gpt(p) => Ok(p),
        b => bail!("{} holds a {} baseline, not gpt", path.display(), b.kind().name()),
    }
}

fn all_episodes(d: &Dataset) -> Vec<usize> {
    (0..d.n_episodes()).collect()
}

fn write_csv(rows: &[EvalRow], out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_rows(rows, out, false)?;
    log::info!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn run_collect(common: &Common, env: &str, recipe: Recipe, task: Option<&str>) -> Result<()> {
    let s = Settings::load(common)?;
    let env = EnvId::parse(env)?;
    let dc = s.data()?;
    let data = match (recipe, task) {
        (Recipe::NearExpert, Some(t)) => {
            let task = TaskId::parse(t)?;
            if task.env() != env {
                bail!("task {t} does not belong to {}", env.name());
            }
            collect_near_expert(task, dc.episodes_per_task, dc.ep_len, s.seed)?
        }
        (Recipe::NearExpert, None) => collect_near_expert_domain(env, dc.episodes_per_task, dc.ep_len, s.seed)?,
        (Recipe::Mixed, None) => collect_mixed(env, dc.mixed_episodes, dc.ep_len, s.seed)?,
        (Recipe::Random, None) => collect(env, PolicySpec::UniformRandom, dc.random_episodes, dc.ep_len, s.seed)?,
        (_, Some(_)) => bail!("--task only applies to the near-expert recipe"),
    };
    if let Some(dir) = common.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_dataset(&data, &common.out)?;
    log::info!("wrote {} episodes to {}", data.n_episodes(), common.out.display());
    Ok(())
}

fn run_pretrain(common: &Common, data: &Path) -> Result<()> {
    let s = Settings::load(common)?;
    let data = load_data(data)?;
    let run = pretrain(&s.model(data.env)?, &data, &s.train()?, Some(&common.out))?;
    if let Some(r) = run.final_row() {
        log::info!("final held-out total mse {:.5}", r.holdout_total_mse);
    }
    Ok(())
}

fn run_train_baseline(common: &Common, data: &Path, kind: &str) -> Result<()> {
    let s = Settings::load(common)?;
    let data = load_data(data)?;
    let kind = BaselineKind::parse(kind)?;
    train_baseline(&s.baseline(kind, data.env)?, &data, &s.train()?, Some(&common.out))?;
    Ok(())
}

fn run_goal(args: &GoalArgs, multi: bool) -> Result<()> {
    let s = Settings::load(&args.common)?;
    let data = load_data(&args.data)?;
    let env = data.env;
    let task = if multi { "multi_goal" } else { "single_goal" };
    let queries = build_queries(&data, &all_episodes(&data), &s.queries(multi)?, s.seed)?;
    let mut rows = Vec::new();
    if let Some(path) = &args.ckpt {
        let params = load_model(path)?;
        let mut variants = vec![(ExecMode::Open, true), (ExecMode::Closed, true)];
        if multi {
            variants.push((ExecMode::Closed, false));
        }
        for (mode, foresight) in variants {
            let m = Method::MaskDp {
                params: &params,
                mode,
                foresight,
            };
            rows.extend(run_goal_eval(&m, env, task, &queries, s.seed, args.ckpt_step)?);
        }
    }
    for path in &args.baseline {
        let b = load_baseline(path)?;
        rows.extend(run_goal_eval(&Method::Baseline(&b), env, task, &queries, s.seed, args.ckpt_step)?);
    }
    if args.random {
        rows.extend(run_goal_eval(&Method::Random { seed: s.seed }, env, task, &queries, s.seed, 0)?);
    }
    if rows.is_empty() {
        bail!("nothing to evaluate: pass --ckpt, --baseline or --random");
    }
    write_csv(&rows, &args.common.out)
}

#[allow(clippy::too_many_arguments)]
fn run_prompt(
    common: &Common,
    data: &Path,
    task: &str,
    ckpt: Option<&Path>,
    gpt: Option<&Path>,
    (k, n, horizon): (usize, usize, usize),
    mode: ExecMode,
    ckpt_step: usize,
) -> Result<()> {
    let s = Settings::load(common)?;
    let data = load_data(data)?;
    let task = TaskId::parse(task)?;
    let prompts = build_prompts(&data, &all_episodes(&data), n, k, s.seed)?;
    let mut rows = Vec::new();
    if let Some(p) = ckpt {
        let params = load_model(p)?;
        rows.extend(run_prompt_eval(Prompter::MaskDp(&params), task, &prompts, horizon, mode, s.seed, ckpt_step)?);
    }
    if let Some(p) = gpt {
        let params = load_gpt(p)?;
        rows.extend(run_prompt_eval(Prompter::Gpt(&params), task, &prompts, horizon, mode, s.seed, ckpt_step)?);
    }
    if rows.is_empty() {
        bail!("nothing to evaluate: pass --ckpt or --gpt");
    }
    write_csv(&rows, &common.out)
}

fn run_finetune(common: &Common, data: &Path, task: &str, backbone: Backbone, ckpt: Option<&Path>, steps: usize) -> Result<()> {
    let s = Settings::load(common)?;
    let data = load_data(data)?;
    let task = TaskId::parse(task)?;
    let cfg = s.rl()?;
    let init = if ckpt.is_some() { RlInit::Pretrained } else { RlInit::Scratch };
    let rows = match backbone {
        Backbone::Maskdp => {
            let b = match ckpt {
                Some(p) => load_model(p)?,
                None => ModelParams::init(&s.model(data.env)?, s.seed)?,
            };
            let run = rl_finetune(b, &data, task, &cfg, steps, s.seed)?;
            rl_rows(&run, &format!("maskdp_{}", init.name()), task, s.seed)
        }
        Backbone::Gpt => {
            let b = match ckpt {
                Some(p) => load_gpt(p)?,
                None => GptParams::init(&s.baseline(BaselineKind::Gpt, data.env)?, s.seed)?,
            };
            let run = rl_finetune(b, &data, task, &cfg, steps, s.seed)?;
            rl_rows(&run, &format!("gpt_{}", init.name()), task, s.seed)
        }
    };
    write_csv(&rows, &common.out)
}

#[allow(clippy::too_many_arguments)]
fn run_ablate(
    common: &Common,
    kind: &str,
    data: Option<&Path>,
    val: Option<&Path>,
    ckpt: Option<&Path>,
    task: Option<&str>,
    (k, n): (usize, usize),
    ckpt_step: usize,
) -> Result<()> {
    let s = Settings::load(common)?;
    let kind = AblationKind::parse(kind)?;
    let need = |p: Option<&Path>, flag: &str| p.map(Path::to_path_buf).with_context(|| format!("ablation {} needs {flag}", kind.name()));
    let rows = match kind {
        AblationKind::Ratio | AblationKind::LossMode | AblationKind::Scale => {
            let data = load_data(&need(data, "--data")?)?;
            let queries = match kind {
                AblationKind::LossMode => Vec::new(),
                _ => {
                    let v = load_data(&need(val, "--val")?)?;
                    build_queries(&v, &all_episodes(&v), &s.queries(false)?, s.seed)?
                }
            };
            let setup = PretrainSetup {
                data: &data,
                model: s.model(data.env)?,
                train: s.train()?,
                queries: &queries,
                query_task: "single_goal",
            };
            let dir = common.out.with_extension("runs");
            match kind {
                AblationKind::Ratio => ablation::ratio_ablation(&setup, Some(&dir))?,
                AblationKind::LossMode => ablation::loss_mode_ablation(&setup, Some(&dir))?,
                _ => ablation::scale_ablation(&setup, Some(&dir))?,
            }
        }
        AblationKind::Foresight => {
            let v = load_data(&need(val, "--val")?)?;
            let params = load_model(&need(ckpt, "--ckpt")?)?;
            let queries = build_queries(&v, &all_episodes(&v), &s.queries(true)?, s.seed)?;
            ablation::foresight_ablation(&params, v.env, "multi_goal", &queries, s.seed, ckpt_step)?
        }
        AblationKind::Horizon => {
            let v = load_data(&need(val, "--val")?)?;
            let params = load_model(&need(ckpt, "--ckpt")?)?;
            let task = TaskId::parse(task.context("ablation horizon needs --task")?)?;
            let prompts = build_prompts(&v, &all_episodes(&v), n, k, s.seed)?;
            ablation::horizon_ablation(&params, task, &prompts, &ablation::HORIZONS, s.seed, ckpt_step)?
        }
    };
    write_csv(&rows, &common.out)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Collect { common, env, recipe, task } => run_collect(&common, &env, recipe, task.as_deref()),
        Command::Pretrain { common, data } => run_pretrain(&common, &data),
        Command::TrainBaseline { common, data, kind } => run_train_baseline(&common, &data, &kind),
        Command::EvalGoal(args) => run_goal(&args, false),
        Command::EvalMultigoal(args) => run_goal(&args, true),
        Command::Prompt {
            common,
            data,
            task,
            ckpt,
            gpt,
            k,
            n,
            horizon,
            mode,
            ckpt_step,
        } => run_prompt(&common, &data, &task, ckpt.as_deref(), gpt.as_deref(), (k, n, horizon), mode.into(), ckpt_step),
        Command::FinetuneRl {
            common,
            data,
            task,
            backbone,
            ckpt,
            steps,
        } => run_finetune(&common, &data, &task, backbone, ckpt.as_deref(), steps),
        Command::Ablate {
            common,
            kind,
            data,
            val,
            ckpt,
            task,
            k,
            n,
            ckpt_step,
        } => run_ablate(&common, &kind, data.as_deref(), val.as_deref(), ckpt.as_deref(), task.as_deref(), (k, n), ckpt_step),
    }
}
