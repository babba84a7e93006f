pub mod evaluate;
pub mod inpaint;
pub mod maskgen;
pub mod postproc;
pub mod schedule;
pub mod train;
