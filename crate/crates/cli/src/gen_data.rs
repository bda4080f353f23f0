use std::fs;

use anyhow::{Context, Result};
use treplina::data::{gen_corpus, write_csv, SyntheticLangSpec};

use crate::args::GenDataArgs;
use crate::setup::{sidecar_path, CorpusSidecar};

/// Writes the CSV and its sidecar; returns the number of pairs written.
pub fn cmd_gen_data(args: &GenDataArgs) -> Result<usize> {
    let spec = SyntheticLangSpec {
        src_lang: args.src_lang.clone(),
        tgt_lang: args.tgt_lang.clone(),
        ..SyntheticLangSpec::new(args.base_vocab, args.cipher_seed, args.rule, args.fertility)
    };
    let examples = gen_corpus(&spec, args.n, args.min_len..=args.max_len, args.seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_csv(&args.out, &examples, &args.src_col, &args.tgt_col)?;
    let sidecar = CorpusSidecar {
        spec,
        n: args.n,
        min_len: args.min_len,
        max_len: args.max_len,
        seed: args.seed,
        src_col: args.src_col.clone(),
        tgt_col: args.tgt_col.clone(),
    };
    let path = sidecar_path(&args.out);
    fs::write(&path, serde_json::to_string_pretty(&sidecar)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {} pairs to {}", examples.len(), args.out.display());
    Ok(examples.len())
}
