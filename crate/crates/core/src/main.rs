mod cli;

// The tape allocates fresh buffers for every node; glibc's heap trimming
// turns that into page faults on each step.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    std::process::exit(cli::run());
}
