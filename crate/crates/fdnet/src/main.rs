use fdnet::ErrorClass;

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match fdnet::cli::run(&argv) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.class() {
                ErrorClass::Validation => 1,
                ErrorClass::Runtime => 2,
                ErrorClass::Io => 3,
            };
            std::process::exit(code);
        }
    }
}
