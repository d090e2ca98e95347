pub mod ssp;
pub mod gradcheck;
