//! `cofiner` command line: coarse-to-fine NER training pipeline.

mod cmds;
mod flags;
mod setup;

use cofiner::Error;
use flags::Flags;
use std::process::ExitCode;

const USAGE: &str = "\
usage: cofiner <command> [flags]

commands:
  sample   K~(K+5)-shot sample a corpus
           --in FILE --k N --seed N --out FILE [--stats FILE]
  train    run the four-step training pipeline
           --seed N [--config FILE] [--run-dir DIR] [--force]
           [--mode no-filtering|no-coarse] [--k N|all] [--learnable-matrix]
           [--fine-first] [--reset-optimizer] [--refilter-every-epoch]
           [--sample-k N] [--step1-epochs N] [--joint-epochs N]
           [--coarse-model-epochs N] [--batch-size N] [--dropout P]
           [--fine FILE --coarse FILE,.. --dev FILE --test FILE]
           [--synthetic benchmark]
  matrix   show a run's fine-to-coarse matrix
           --run DIR [--index I] [--print]
  audit    show a run's per-type filtering proportions
           --run DIR [--index I]
  eval     span-level F1 of a checkpoint on a corpus
           --model FILE --data FILE [--schema FILE] [--matrix FILE]
           [--report-tsv FILE]
  suite    experiment batteries (kshot | topk | ablation)
           kshot:    --seeds 1,2,.. [--k 10,20,..] [--jobs N]
           topk:     --seeds 1,2,.. --k 1,2,all [--kshot N] [--jobs N]
           ablation: --seed N
           plus the train data/config flags; outputs land in the run dir

exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
COFINER_RUN_DIR sets the default run-directory root.
";

fn dispatch(args: &[String]) -> Result<(), MainError> {
    let (command, rest) = args
        .split_first()
        .ok_or_else(|| MainError::Usage("missing command".into()))?;
    let switches = setup::TRAIN_SWITCHES;
    match command.as_str() {
        "sample" => {
            let flags = Flags::parse(rest, switches)?;
            cmds::cmd_sample(&flags)?;
        }
        "train" => {
            let flags = Flags::parse(rest, switches)?;
            cmds::cmd_train(&flags)?;
        }
        "matrix" => {
            let flags = Flags::parse(rest, switches)?;
            cmds::cmd_matrix(&flags)?;
        }
        "audit" => {
            let flags = Flags::parse(rest, switches)?;
            cmds::cmd_audit(&flags)?;
        }
        "eval" => {
            let flags = Flags::parse(rest, switches)?;
            cmds::cmd_eval(&flags)?;
        }
        "suite" => {
            let (sub, rest) = rest
                .split_first()
                .ok_or_else(|| MainError::Usage("suite needs a battery name".into()))?;
            let flags = Flags::parse(rest, switches)?;
            cmds::cmd_suite(sub, &flags)?;
        }
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
        }
        other => return Err(MainError::Usage(format!("unknown command {other:?}"))),
    }
    Ok(())
}

enum MainError {
    Usage(String),
    Runtime(Error),
}

impl From<flags::UsageError> for MainError {
    fn from(e: flags::UsageError) -> Self {
        MainError::Usage(e.0)
    }
}

impl From<Error> for MainError {
    fn from(e: Error) -> Self {
        // argument-level mistakes are usage errors; everything else is runtime
        match e {
            Error::InvalidArgument(_) => MainError::Usage(e.to_string()),
            other => MainError::Runtime(other),
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(MainError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `cofiner help` for usage");
            ExitCode::from(2)
        }
        Err(MainError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
