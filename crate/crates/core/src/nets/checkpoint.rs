//! Model checkpoints stored in the binary container.
//!
//! Sections: `arch` (text tag), `config` (`key = value` lines), one f32 tensor
//! per parameter named `param/<name>`, and `history` (CSV text). Callers may
//! add further text sections such as the run configuration.

use std::path::Path;

use super::cnr::{Cnr, CnrConfig};
use super::refiner::{Refiner, RefinerConfig};
use crate::bundle::Manifest;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::Param;

pub const REFINER_ARCH: &str = "atn-refiner-v1";
pub const CNR_ARCH: &str = "atn-cnr-v1";

fn push_params<'a>(c: &mut Container, params: impl IntoIterator<Item = (String, &'a Param<f32>)>) {
    for (name, p) in params {
        c.push_tensor(&format!("param/{name}"), &p.shape, p.value.clone());
    }
}

fn load_params(c: &Container, names: Vec<String>, params: Vec<&mut Param<f32>>) -> Result<()> {
    for (name, p) in names.into_iter().zip(params) {
        let (shape, data) = c.tensor(&format!("param/{name}"))?;
        if shape != p.shape.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint parameter `{name}` has shape {shape:?}, model expects {:?}",
                p.shape
            )));
        }
        p.value.copy_from_slice(data);
    }
    Ok(())
}

fn check_arch(c: &Container, want: &str) -> Result<Manifest> {
    let arch = c.text("arch")?;
    if arch != want {
        return Err(Error::Data(format!("checkpoint holds `{arch}`, expected `{want}`")));
    }
    Ok(Manifest::parse(c.text("config")?)?)
}

pub fn refiner_container(model: &Refiner<f32>, history_csv: &str) -> Container {
    let mut c = Container::new();
    c.push_text("arch", REFINER_ARCH);
    let mut m = Manifest::new();
    m.set("width", model.config.width);
    m.set("blocks", model.config.blocks);
    c.push_text("config", m.to_text());
    push_params(&mut c, model.named_params());
    c.push_text("history", history_csv);
    c
}

pub fn refiner_from_container(c: &Container) -> Result<Refiner<f32>> {
    let m = check_arch(c, REFINER_ARCH)?;
    let config = RefinerConfig {
        width: m.require("width")?,
        blocks: m.require("blocks")?,
    };
    let mut model = Refiner::new(&config, 0)?;
    let names = model.named_params().into_iter().map(|(n, _)| n).collect();
    load_params(c, names, model.params_mut())?;
    Ok(model)
}

pub fn cnr_container(model: &Cnr<f32>, history_csv: &str) -> Container {
    let mut c = Container::new();
    c.push_text("arch", CNR_ARCH);
    let mut m = Manifest::new();
    let widths: Vec<String> = model.config.conv_widths.iter().map(|w| w.to_string()).collect();
    m.set("conv_widths", widths.join(","));
    m.set("hidden", model.config.hidden);
    m.set("input_size", model.config.input_size);
    c.push_text("config", m.to_text());
    push_params(&mut c, model.named_params());
    c.push_text("history", history_csv);
    c
}

pub fn cnr_from_container(c: &Container) -> Result<Cnr<f32>> {
    let m = check_arch(c, CNR_ARCH)?;
    let raw: String = m.require("conv_widths")?;
    let conv_widths = raw
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Data(format!("bad conv_widths `{raw}`")))?;
    let config = CnrConfig {
        conv_widths,
        hidden: m.require("hidden")?,
        input_size: m.require("input_size")?,
    };
    let mut model = Cnr::new(&config, 0)?;
    let names = model.named_params().into_iter().map(|(n, _)| n).collect();
    load_params(c, names, model.params_mut())?;
    Ok(model)
}

pub fn load_refiner(path: &Path) -> Result<Refiner<f32>> {
    refiner_from_container(&Container::read(path)?)
}

pub fn load_cnr(path: &Path) -> Result<Cnr<f32>> {
    cnr_from_container(&Container::read(path)?)
}
