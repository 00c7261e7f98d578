// mdbook cannot run the listings against workspace crates, so each chapter
// becomes a module's docs here and `cargo test` runs its code blocks.

#[cfg(doctest)]
#[doc = include_str!("src/introduction.md")]
mod introduction {}
#[cfg(doctest)]
#[doc = include_str!("src/noise.md")]
mod noise {}
#[cfg(doctest)]
#[doc = include_str!("src/kernels.md")]
mod kernels {}
#[cfg(doctest)]
#[doc = include_str!("src/objective.md")]
mod objective {}
#[cfg(doctest)]
#[doc = include_str!("src/fitting.md")]
mod fitting {}
#[cfg(doctest)]
#[doc = include_str!("src/uncertainty.md")]
mod uncertainty {}
#[cfg(doctest)]
#[doc = include_str!("src/experiments.md")]
mod experiments {}
#[cfg(doctest)]
#[doc = include_str!("src/cli.md")]
mod cli {}
#[cfg(doctest)]
#[doc = include_str!("src/config.md")]
mod config {}
