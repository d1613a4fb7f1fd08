pub mod autodiff;
pub mod calibration;
pub mod fed_protocol;
pub mod harness;
pub mod segnet;
pub mod synthdata;
