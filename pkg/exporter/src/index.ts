export { DEFAULT_MODEL, Encoder, loadEncoder, pooledIntensities } from "./encoder";
export { EmbeddingFile, EmbeddingRecord, decodeFmeb, encodeFmeb } from "./fmeb";
export {
  CLASS_PLACEHOLDER,
  ExportJob,
  ExportStats,
  exportImages,
  exportPrompts,
  instantiateTemplate,
} from "./exporter";
export { DecodedImage, decodeImage, listClassImages, readClassList } from "./images";
