use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{RomConstants, SsmRom};
use crate::error::{Error, Result};
use crate::poly::PolynomialMap;

pub const ROM_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RomFile {
    version: u32,
    n: usize,
    n_f: usize,
    m: usize,
    n_y: usize,
    constants: RomConstants,
    #[serde(with = "crate::linalg::rows")]
    a_r: DMatrix<f64>,
    #[serde(with = "crate::linalg::rows")]
    b_r: DMatrix<f64>,
    #[serde(with = "crate::linalg::rows")]
    b_n: DMatrix<f64>,
    #[serde(with = "crate::linalg::rows")]
    c: DMatrix<f64>,
    w_nl: PolynomialMap,
    r_nl: PolynomialMap,
}

impl SsmRom {
    pub fn to_toml_string(&self) -> Result<String> {
        let file = RomFile {
            version: ROM_FORMAT_VERSION,
            n: self.n(),
            n_f: self.n_f(),
            m: self.m(),
            n_y: self.n_y(),
            constants: self.constants,
            a_r: self.a_r.clone(),
            b_r: self.b_r.clone(),
            b_n: self.b_n.clone(),
            c: self.c.clone(),
            w_nl: self.w_nl.clone(),
            r_nl: self.r_nl.clone(),
        };
        toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: RomFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if file.version != ROM_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported ROM format version {} (expected {ROM_FORMAT_VERSION})",
                file.version
            )));
        }
        let rom = SsmRom::new(file.a_r, file.w_nl, file.r_nl, file.b_r, file.b_n, file.c, file.constants)?;
        if (rom.n(), rom.n_f(), rom.m(), rom.n_y()) != (file.n, file.n_f, file.m, file.n_y) {
            return Err(Error::Config("ROM header dimensions disagree with its tables".into()));
        }
        Ok(rom)
    }
}

pub fn save_rom(rom: &SsmRom, path: &Path) -> Result<()> {
    std::fs::write(path, rom.to_toml_string()?)?;
    Ok(())
}

pub fn load_rom(path: &Path) -> Result<SsmRom> {
    SsmRom::from_toml_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::{manufacture_benchmark, BenchmarkConfig};

    #[test]
    fn rom_round_trips_exactly() {
        let (_, rom) = manufacture_benchmark(&BenchmarkConfig::small_test().to_spec().unwrap()).unwrap();
        let text = rom.to_toml_string().unwrap();
        assert!(text.starts_with("version = 1"));
        assert_eq!(SsmRom::from_toml_str(&text).unwrap(), rom);
    }

    #[test]
    fn rejects_other_versions() {
        let (_, rom) = manufacture_benchmark(&BenchmarkConfig::small_test().to_spec().unwrap()).unwrap();
        let text = rom.to_toml_string().unwrap().replacen("version = 1", "version = 7", 1);
        assert!(matches!(SsmRom::from_toml_str(&text), Err(Error::Config(_))));
    }
}
