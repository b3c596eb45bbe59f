//! Command-line pipeline stages and the annotation service.

pub mod ablate;
pub mod cli;
pub mod commands;
pub mod service;

use anyhow::Result;
use shadowsam_core::lstn::Lstn;
use shadowsam_core::propagation::PlusSettings;

use cli::{Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = commands::resolve_config(&cli.config)?;
    match &cli.command {
        Command::Finetune(a) => commands::finetune_cmd(&cfg, a),
        Command::TrainLstn(a) => commands::train_cmd(&cfg, a),
        Command::Infer(a) => commands::infer_cmd(&cfg, a),
        Command::InferPlus(a) => commands::infer_plus_cmd(&cfg, a),
        Command::Eval(a) => commands::eval_cmd(&cfg, a),
        Command::Ablate(a) => ablate::ablate_cmd(&cfg, a),
        Command::Synth(a) => commands::synth_cmd(a),
        Command::Serve(a) => {
            let segmenter = commands::load_segmenter(&a.models.segmenter)?;
            let lstn = Lstn::load(&a.models.lstn)?;
            let settings = PlusSettings::from_run_config(&cfg);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let app = service::AppState::open(&a.data, &a.state, segmenter, lstn, settings)?;
                service::serve(app, &format!("{}:{}", a.host, a.port)).await
            })
        }
    }
}
