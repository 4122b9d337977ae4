use clap::Parser;

use craftloop_service::cli::{eval_cmd, gen_vision_cmd, run_loop_cmd, serve_cmd, Cli, Cmd};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Cmd::RunLoop(args) => print!("{}", run_loop_cmd(&args)?),
        Cmd::GenVisionData(args) => {
            let n = gen_vision_cmd(&args)?;
            eprintln!("wrote {n} examples to {}", args.out.display());
        }
        Cmd::Eval(args) => println!("{}", eval_cmd(&args)?),
        Cmd::Serve(args) => tokio::runtime::Runtime::new()?.block_on(serve_cmd(&args))?,
    }
    Ok(())
}
