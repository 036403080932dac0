//! Drives the command-line interface in-process: generates a corpus and
//! checks a placement plan.

fn main() {
    let dir = std::env::temp_dir().join("modse-cli-run");
    let out = dir.to_string_lossy().into_owned();
    let corpus = format!("{out}/corpus");
    let plan = format!("{out}/plan");
    for args in [
        vec!["modse", "gen-data", "--seed", "3", "--lines", "20", "--out", corpus.as_str()],
        vec!["modse", "plan", "--devices", "2", "--out", plan.as_str()],
        vec!["modse", "plan", "--devices", "3", "--out", plan.as_str()],
    ] {
        let code = match modse::cli::run(args.clone()) {
            Ok(()) => 0,
            Err(f) => f.code(),
        };
        println!("{} -> exit {code}", args[1..].join(" "));
    }
}
