//! Reference plugin speaking the line-delimited JSON backend protocol.

use clap::{Parser, ValueEnum};
use evaug_core::backends::echo::{serve, EchoFault};

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    None,
    ScaleRows,
    DropRow,
}

#[derive(Parser)]
#[command(version, about = "Echo every request back from its own input")]
struct Args {
    /// Corrupt generations on purpose, for conformance testing.
    #[arg(long, value_enum, default_value = "none")]
    fault: Fault,
}

fn main() -> std::io::Result<()> {
    let fault = match Args::parse().fault {
        Fault::None => EchoFault::None,
        Fault::ScaleRows => EchoFault::ScaleRows,
        Fault::DropRow => EchoFault::DropRow,
    };
    serve(std::io::stdin().lock(), std::io::stdout().lock(), fault)
}
