use std::process::ExitCode;

fn main() -> ExitCode {
    // stdout closed early (e.g. piped into `head`): stop quietly
    let default_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(move |info| {
        let msg = info.payload().downcast_ref::<String>().map(String::as_str).unwrap_or("");
        if msg.contains("Broken pipe") {
            std::process::exit(0);
        }
        default_hook(info);
    }));
    fpquant::cli::main()
}
