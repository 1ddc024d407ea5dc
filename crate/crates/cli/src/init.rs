//! `wormbox init`: format the image when it does not exist yet, create the
//! configured log files empty, and initialize the seal store.

use std::fs;
use std::path::Path;
use std::process::Command;

use rand::RngCore;
use wormbox_core::block::file_sha256;
use wormbox_core::config::Config;
use wormbox_core::engine::FsKind;
use wormbox_core::mkfs::{self, ExfatParams};
use wormbox_core::seal::{SealError, SealStore};
use wormbox_core::{exfat, ext4};

use crate::{failure, usage, CliResult};

/// The log creation path loads the whole image into memory. Plenty for the
/// desk-scale images init is meant for; the bench builds its own images.
const MAX_INIT_IMAGE: u64 = 1 << 30;

pub fn run(config_path: &Path) -> CliResult {
    let cfg = crate::load_config(config_path)?;

    let existed = fs::metadata(&cfg.image).map(|m| m.len() > 0).unwrap_or(false);
    if !existed {
        format_image(&cfg)?;
    }

    let len = fs::metadata(&cfg.image)
        .map_err(|e| usage(format!("image {}: {e}", cfg.image.display())))?
        .len();
    if len > MAX_INIT_IMAGE {
        return Err(usage(format!(
            "image is {len} bytes; init handles at most {MAX_INIT_IMAGE}"
        )));
    }

    let mut img = fs::read(&cfg.image)
        .map_err(|e| failure(format!("reading image {}: {e}", cfg.image.display())))?;
    for path in cfg.logs.values() {
        let name = path.trim_start_matches('/');
        match cfg.fs {
            FsKind::Ext4 => {
                mkfs::ext4_add_empty_file(&mut img, name)
                    .map_err(|e| usage(format!("creating {name}: {e}")))?;
            }
            FsKind::Exfat => {
                mkfs::exfat_add_empty_file(&mut img, name)
                    .map_err(|e| usage(format!("creating {name}: {e}")))?;
            }
        }
    }
    fs::write(&cfg.image, &img)
        .map_err(|e| failure(format!("writing image {}: {e}", cfg.image.display())))?;

    println!(
        "init image={} fs={} capacity={} created={}",
        cfg.image.display(),
        fs_name(cfg.fs),
        img.len(),
        !existed
    );
    print_locators(&cfg, &img)?;

    let k0 = match cfg.seed {
        Some(seed) => seed,
        None => {
            let mut k = [0u8; 32];
            rand::rngs::OsRng.fill_bytes(&mut k);
            k
        }
    };
    match SealStore::init(&cfg.store, k0) {
        Ok(_) => {}
        Err(SealError::AlreadyInitialized) => {
            return Err(usage(format!("store {} is already initialized", cfg.store.display())));
        }
        Err(e) => return Err(failure(format!("store init: {e}"))),
    }
    for id in cfg.logs.keys() {
        let p = cfg.store.join("logs").join(format!("{id}.log"));
        fs::File::create(&p).map_err(|e| failure(format!("creating {}: {e}", p.display())))?;
    }
    println!(
        "init store={} auditor_key={}",
        cfg.store.display(),
        cfg.store.join("auditor.key").display()
    );

    let digest = file_sha256(&cfg.image).map_err(|e| failure(format!("hashing image: {e}")))?;
    println!("init sha256={}", hex::encode(digest));
    Ok(())
}

fn fs_name(fs: FsKind) -> &'static str {
    match fs {
        FsKind::Ext4 => "ext4",
        FsKind::Exfat => "exfat",
    }
}

fn format_image(cfg: &Config) -> CliResult {
    let capacity = cfg.capacity_bytes.ok_or_else(|| {
        usage("image does not exist and capacity_bytes is not set, nothing to format")
    })?;
    match cfg.fs {
        FsKind::Ext4 => format_ext4(cfg, capacity),
        FsKind::Exfat => format_exfat(cfg, capacity),
    }
}

fn format_ext4(cfg: &Config, capacity: u64) -> CliResult {
    let tool = find_tool("mke2fs").ok_or_else(|| {
        usage("mke2fs not found and the image does not exist; format it externally or install e2fsprogs")
    })?;
    let file = fs::File::create(&cfg.image)
        .map_err(|e| failure(format!("creating image {}: {e}", cfg.image.display())))?;
    file.set_len(capacity).map_err(|e| failure(format!("sizing image: {e}")))?;
    drop(file);
    let mut features = String::from("^metadata_csum,^64bit");
    if cfg.journal_mode == wormbox_core::engine::JournalMode::None {
        features.push_str(",^has_journal");
    }
    let status = Command::new(&tool)
        .args(["-F", "-q", "-t", "ext4", "-b", &cfg.block_size_bytes.to_string(), "-I", "256", "-O", &features])
        .arg(&cfg.image)
        .status()
        .map_err(|e| failure(format!("running {tool}: {e}")))?;
    if !status.success() {
        return Err(usage(format!("{tool} exited with {status}")));
    }
    Ok(())
}

fn format_exfat(cfg: &Config, capacity: u64) -> CliResult {
    let shift = cfg.block_size_bytes.trailing_zeros() as u8;
    let params = ExfatParams {
        bytes_per_sector_shift: 9,
        sectors_per_cluster_shift: shift - 9,
        ..ExfatParams::default()
    };
    let meta = mkfs::exfat_metadata_len(capacity, &params)
        .map_err(|e| usage(format!("exfat geometry: {e}")))?;
    let mut prefix = vec![0u8; meta as usize];
    mkfs::format_exfat_prefix(&mut prefix, capacity, &params)
        .map_err(|e| usage(format!("exfat format: {e}")))?;
    let file = fs::File::create(&cfg.image)
        .map_err(|e| failure(format!("creating image {}: {e}", cfg.image.display())))?;
    file.set_len(capacity).map_err(|e| failure(format!("sizing image: {e}")))?;
    use std::io::{Seek, SeekFrom, Write};
    let mut file = file;
    file.seek(SeekFrom::Start(0)).map_err(|e| failure(e.to_string()))?;
    file.write_all(&prefix).map_err(|e| failure(format!("writing format: {e}")))?;
    file.sync_data().map_err(|e| failure(e.to_string()))?;
    Ok(())
}

fn find_tool(name: &str) -> Option<String> {
    for dir in ["/usr/sbin", "/sbin", "/usr/local/sbin"] {
        let p = format!("{dir}/{name}");
        if Path::new(&p).exists() {
            return Some(p);
        }
    }
    let on_path = Command::new(name).arg("-V").output().is_ok();
    on_path.then(|| name.to_string())
}

/// Resolve each configured log inside the final image and print one locator
/// line per log. Doubles as a consistency check of the minimal writer.
fn print_locators(cfg: &Config, img: &[u8]) -> CliResult {
    match cfg.fs {
        FsKind::Ext4 => {
            let sb = ext4::parse_superblock(img).map_err(|e| usage(format!("ext4 superblock: {e}")))?;
            for (id, path) in &cfg.logs {
                let ino = ext4::lookup_root(img, &sb, path)
                    .map_err(|e| failure(format!("log {path} not found after creation: {e}")))?;
                let inode = ext4::read_inode(img, &sb, ino)
                    .map_err(|e| failure(format!("inode {ino}: {e}")))?;
                if !inode.is_regular() || inode.size != 0 {
                    return Err(failure(format!("log {path} came out wrong: size {}", inode.size)));
                }
                println!(
                    "init log id={id} path={path} inode={ino} size=0 append_only={}",
                    inode.append_only()
                );
            }
        }
        FsKind::Exfat => {
            let sb = exfat::parse_boot_sector(&img[..512.min(img.len())])
                .map_err(|e| usage(format!("exfat boot sector: {e}")))?;
            exfat::verify_boot_regions(&img, &sb).map_err(|e| usage(format!("boot regions: {e}")))?;
            for (id, path) in &cfg.logs {
                let name = path.trim_start_matches('/');
                let set = exfat::lookup_root(&img, &sb, name)
                    .map_err(|e| failure(format!("log {path} not found after creation: {e}")))?;
                if !set.checksum_ok || set.stream.data_length != 0 {
                    return Err(failure(format!("entry set for {path} came out wrong")));
                }
                println!(
                    "init log id={id} path={path} entry_offset={} size=0 checksum_ok=true",
                    set.entry_offset
                );
            }
        }
    }
    Ok(())
}
